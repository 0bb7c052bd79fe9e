"""Detection evaluation: AP/mAP, size and motion breakdowns, confusion matrix.

Detections and ground truths are keyed by an opaque hashable frame id
(``(video, t)`` in this package) so metrics aggregate across any collection
of frames. AP uses greedy confidence-ordered matching and all-point
interpolation of the precision-recall curve.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .core import Annotation, Detection, iou
from .synthdata import Dataset, ObjectMotion, valid_offsets

FrameId = Hashable
DetItem = tuple[FrameId, Detection]
GtItem = tuple[FrameId, Annotation]

RANGE_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))

# Frame-relative size classes and box-overlap motion classes.
SMALL_AREA_FRACTION = 0.02
LARGE_AREA_FRACTION = 0.10
SLOW_MOTION_IOU = 0.9
FAST_MOTION_IOU = 0.7


def _greedy_match(dets: list[DetItem], gts: list[GtItem], iou_thresh: float,
                  ignore_gts: list[GtItem] | None = None):
    """Greedy matching by descending confidence.

    Returns (tp_flags, use_flags): detections matching an ignore ground truth
    (and nothing real) get use=False and count as neither TP nor FP.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].confidence)
    gt_by_frame: dict[FrameId, list[int]] = {}
    for idx, (frame, _) in enumerate(gts):
        gt_by_frame.setdefault(frame, []).append(idx)
    ignore_by_frame: dict[FrameId, list[Annotation]] = {}
    for frame, anno in ignore_gts or []:
        ignore_by_frame.setdefault(frame, []).append(anno)

    matched = [False] * len(gts)
    tp = [False] * len(dets)
    use = [True] * len(dets)
    for i in order:
        frame, det = dets[i]
        best_iou, best_gt = 0.0, None
        for gi in gt_by_frame.get(frame, []):
            if matched[gi]:
                continue
            value = iou(det.bbox, gts[gi][1].bbox)
            if value >= iou_thresh and value > best_iou:
                best_iou, best_gt = value, gi
        if best_gt is not None:
            matched[best_gt] = True
            tp[i] = True
            continue
        for anno in ignore_by_frame.get(frame, []):
            if iou(det.bbox, anno.bbox) >= iou_thresh:
                use[i] = False
                break
    return tp, use, order


def average_precision(dets: Sequence[DetItem], gts: Sequence[GtItem],
                      iou_thresh: float, class_id: int,
                      ignore_gts: Sequence[GtItem] = ()) -> float | None:
    """All-point-interpolated AP for one class; None when the class has no
    ground truth (excluded from the mean)."""
    class_gts = [(f, a) for f, a in gts if a.class_id == class_id]
    if not class_gts:
        return None
    class_dets = [(f, d) for f, d in dets if d.hard_class == class_id]
    ignore = [(f, a) for f, a in ignore_gts if a.class_id == class_id]
    tp, use, order = _greedy_match(class_dets, class_gts, iou_thresh, ignore)

    tps = np.array([tp[i] for i in order if use[i]], dtype=np.float64)
    if tps.size == 0:
        return 0.0
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(1.0 - tps)
    recall = cum_tp / len(class_gts)
    precision = cum_tp / (cum_tp + cum_fp)

    # precision envelope from the right, summed over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def pr_curve(dets: Sequence[DetItem], gts: Sequence[GtItem], iou_thresh: float,
             class_id: int) -> list[tuple[float, float]]:
    """Cumulative (recall, precision) points in confidence order."""
    class_gts = [(f, a) for f, a in gts if a.class_id == class_id]
    class_dets = [(f, d) for f, d in dets if d.hard_class == class_id]
    if not class_gts:
        return []
    tp, use, order = _greedy_match(class_dets, class_gts, iou_thresh)
    points = []
    n_tp = n_fp = 0
    for i in order:
        if not use[i]:
            continue
        if tp[i]:
            n_tp += 1
        else:
            n_fp += 1
        points.append((n_tp / len(class_gts), n_tp / (n_tp + n_fp)))
    return points


def mean_ap(dets: Sequence[DetItem], gts: Sequence[GtItem], iou_thresh: float,
            num_classes: int, ignore_gts: Sequence[GtItem] = ()
            ) -> tuple[float, dict[int, float | None]]:
    """Unweighted class mean over classes with at least one ground truth."""
    per_class: dict[int, float | None] = {}
    values = []
    for class_id in range(num_classes):
        ap = average_precision(dets, gts, iou_thresh, class_id, ignore_gts)
        per_class[class_id] = ap
        if ap is not None:
            values.append(ap)
    return (float(np.mean(values)) if values else 0.0), per_class


def map_range(dets: Sequence[DetItem], gts: Sequence[GtItem], num_classes: int,
              ignore_gts: Sequence[GtItem] = ()) -> float:
    """COCO-style mean of mAP over IoU 0.50:0.05:0.95."""
    values = [mean_ap(dets, gts, thr, num_classes, ignore_gts)[0]
              for thr in RANGE_THRESHOLDS]
    return float(np.mean(values))


def size_category(anno: Annotation, frame_area: float) -> str:
    fraction = anno.bbox.area() / frame_area
    if fraction < SMALL_AREA_FRACTION:
        return "small"
    if fraction > LARGE_AREA_FRACTION:
        return "large"
    return "middle"


def motion_category(obj: ObjectMotion, t: int, num_frames: int) -> str:
    """Slow/medium/fast by mean IoU of the object's box with itself at t+-1."""
    neighbors = [t + d for d in (-1, 1) if 0 <= t + d < num_frames]
    values = [iou(obj.box(t), obj.box(n)) for n in neighbors]
    mean_iou = float(np.mean(values)) if values else 1.0
    if mean_iou > SLOW_MOTION_IOU:
        return "slow"
    if mean_iou < FAST_MOTION_IOU:
        return "fast"
    return "medium"


def breakdown(dets: Sequence[DetItem], gts: Sequence[GtItem],
              categories: Sequence[dict[str, str]], num_classes: int) -> dict:
    """Size/motion sub-reports (mAP@0.5:0.95 per category).

    ``categories`` aligns with ``gts``. Ground truths outside the category
    are ignore-regions: detections on them are neither TP nor FP.
    """
    if len(categories) != len(gts):
        raise ValueError("one category record per ground truth required")
    report: dict[str, dict[str, float | None]] = {}
    for dimension, names in (("size", ("small", "middle", "large")),
                             ("motion", ("slow", "medium", "fast"))):
        report[dimension] = {}
        for name in names:
            keep = [i for i, cat in enumerate(categories) if cat[dimension] == name]
            keep_set = set(keep)
            cat_gts = [gts[i] for i in keep]
            ignore = [gts[i] for i in range(len(gts)) if i not in keep_set]
            report[dimension][name] = map_range(dets, cat_gts, num_classes, ignore) \
                if cat_gts else None
    return report


def confusion_matrix(dets: Sequence[DetItem], gts: Sequence[GtItem],
                     num_classes: int, iou_thresh: float = 0.5,
                     conf_thresh: float = 0.5) -> np.ndarray:
    """C x (C+1) counts; each ground truth matches its best detection at
    IoU >= iou_thresh with confidence >= conf_thresh, else the last (missed)
    column is incremented. Row sums equal per-class ground-truth counts."""
    matrix = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    dets_by_frame: dict[FrameId, list[Detection]] = {}
    for frame, det in dets:
        if det.confidence >= conf_thresh:
            dets_by_frame.setdefault(frame, []).append(det)
    for frame, anno in gts:
        best_iou, best_det = 0.0, None
        for det in dets_by_frame.get(frame, []):
            value = iou(det.bbox, anno.bbox)
            if value >= iou_thresh and value > best_iou:
                best_iou, best_det = value, det
        if best_det is None:
            matrix[anno.class_id, num_classes] += 1
        else:
            matrix[anno.class_id, best_det.hard_class] += 1
    return matrix


@dataclass
class EvalReport:
    """Full evaluation payload, serializable to JSON and flat CSV."""

    map50: float
    map75: float
    map_range: float
    per_class_ap50: dict[int, float | None]
    size_breakdown: dict[str, float]
    motion_breakdown: dict[str, float]
    confusion: np.ndarray
    num_frames: int
    num_gts: int
    num_dets: int

    def to_json_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map75": self.map75,
            "map_range": self.map_range,
            "per_class_ap50": {str(k): v for k, v in self.per_class_ap50.items()},
            "size_breakdown": self.size_breakdown,
            "motion_breakdown": self.motion_breakdown,
            "confusion": self.confusion.tolist(),
            "num_frames": self.num_frames,
            "num_gts": self.num_gts,
            "num_dets": self.num_dets,
        }

    def save(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["metric", "value"])
                writer.writerow(["map50", self.map50])
                writer.writerow(["map75", self.map75])
                writer.writerow(["map_range", self.map_range])
                for class_id, ap in sorted(self.per_class_ap50.items()):
                    writer.writerow([f"ap50_class_{class_id}", "" if ap is None else ap])
                for dim, block in (("size", self.size_breakdown),
                                   ("motion", self.motion_breakdown)):
                    for name, value in block.items():
                        writer.writerow([f"{dim}_{name}", value])


def evaluate_detections(dets: Sequence[DetItem], gts: Sequence[GtItem],
                        categories: Sequence[dict[str, str]], num_classes: int,
                        num_frames: int) -> EvalReport:
    map50, per_class = mean_ap(dets, gts, 0.5, num_classes)
    map75, _ = mean_ap(dets, gts, 0.75, num_classes)
    full_range = map_range(dets, gts, num_classes)
    cats = breakdown(dets, gts, categories, num_classes)
    confusion = confusion_matrix(dets, gts, num_classes)
    return EvalReport(
        map50=map50, map75=map75, map_range=full_range,
        per_class_ap50=per_class,
        size_breakdown=cats["size"], motion_breakdown=cats["motion"],
        confusion=confusion, num_frames=num_frames,
        num_gts=len(gts), num_dets=len(dets))


def run_detector(params, dataset: Dataset, eval_range: int = 15,
                 key_frames_only: bool = True, threads: int = 1,
                 ) -> tuple[list[DetItem], list[GtItem], list[dict[str, str]]]:
    """Run the detector over a dataset with the evaluation-time reference
    protocol (all valid offsets within +-eval_range, up to 30 references)."""
    from .detector import extract_features, forward
    from .flow import FeatureSet

    def process_video(video: int):
        motion = dataset.motion(video)
        frames = {t: dataset.load_frame(video, t) for t in range(dataset.num_frames)}
        feats = {t: extract_features(frames[t], params) for t in frames}
        key_ts = dataset.key_frames(video) if key_frames_only \
            else list(range(dataset.num_frames))
        dets: list[DetItem] = []
        gts: list[GtItem] = []
        cats: list[dict[str, str]] = []
        frame_area = float(np.prod(dataset.frame_size))
        for t in key_ts:
            offsets = valid_offsets(t, dataset.num_frames, eval_range)
            members = tuple(feats[t + j] for j in ([0] + offsets))
            fset = FeatureSet(members=members, offsets=tuple([0] + offsets))
            _, detections = forward(fset, params)
            frame_id = (video, t)
            dets.extend((frame_id, d) for d in detections)
            for obj in motion.objects:
                anno = Annotation(obj.class_id, obj.box(t))
                gts.append((frame_id, anno))
                cats.append({"size": size_category(anno, frame_area),
                             "motion": motion_category(obj, t, dataset.num_frames)})
        return dets, gts, cats

    results: list = [None] * dataset.num_videos
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for video, result in enumerate(pool.map(process_video,
                                                    range(dataset.num_videos))):
                results[video] = result
    else:
        for video in range(dataset.num_videos):
            results[video] = process_video(video)

    all_dets: list[DetItem] = []
    all_gts: list[GtItem] = []
    all_cats: list[dict[str, str]] = []
    for dets, gts, cats in results:
        all_dets.extend(dets)
        all_gts.extend(gts)
        all_cats.extend(cats)
    return all_dets, all_gts, all_cats


def evaluate_model(params, dataset: Dataset, eval_range: int = 15,
                   threads: int = 1) -> EvalReport:
    """End-to-end: run the detector on all key frames and score it."""
    dets, gts, cats = run_detector(params, dataset, eval_range=eval_range,
                                   threads=threads)
    num_frames = dataset.num_videos * len(dataset.key_frames(0))
    return evaluate_detections(dets, gts, cats, dataset.num_classes, num_frames)
