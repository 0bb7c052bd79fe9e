"""Three-stage pseudo-label selection from flow-warped prediction sets.

The teacher produces raw key-frame predictions plus one prediction set per
flow-warped feature set. Each surviving raw detection is matched by maximum
overlap into every flow-warped set; the mean cross-IoU of those matches
gates the pseudo bounding boxes, the mean cross KL-divergence gates the hard
class labels, and confident detections that fail both consistency gates keep
their full class distribution as soft labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BBox,
    ClassDist,
    Detection,
    PredictionSet,
    iou,
    kl_divergence,
)
from .detector import DetectorParams, extract_features, forward
from .evaluate import average_precision
from .flow import build_feature_sets
from .synthdata import VideoClip

#: Cross-divergence assigned when a raw detection has no match in a
#: flow-warped set: large enough to read as "inconsistent", which pushes the
#: detection out of the hard-class set but leaves the soft set reachable.
XDIV_NONE_PENALTY = 10.0


@dataclass(frozen=True)
class SelectionThresholds:
    """Gates of the selection cascade.

    ``tau_init`` is the initial confidence gate on raw detections, ``gamma_c``
    the confidence gate for soft labels, ``zeta_iou`` the cross-IoU gate for
    pseudo boxes, and ``eta_div`` the cross-divergence gate for hard labels.
    """

    tau_init: float = 0.5
    gamma_c: float = 0.8
    zeta_iou: float = 0.9
    eta_div: float = 0.005

    def __post_init__(self) -> None:
        for name in ("tau_init", "gamma_c", "zeta_iou"):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {value}")
        if self.eta_div <= 0.0:
            raise ValueError(f"eta_div must be positive, got {self.eta_div}")


@dataclass(frozen=True)
class ObjectScore:
    """Consistency record of one surviving raw detection."""

    xiou: float
    xdiv: float
    matches: tuple[tuple[int, int | None], ...]  # (offset, matched index)


@dataclass(frozen=True)
class ConsistencyScores:
    per_object: tuple[ObjectScore, ...]

    def __len__(self) -> int:
        return len(self.per_object)


@dataclass(frozen=True)
class PseudoLabelSet:
    """Partition of the surviving raw detections.

    ``fates`` aligns with the raw prediction set and is one of "bbox", "cls",
    "bbox+cls", "soft", "discarded". Soft labels are disjoint from both hard
    sets by construction of the indicator conditions.
    """

    p_bbox: tuple[BBox, ...]
    p_cls: tuple[tuple[BBox, int], ...]
    p_soft: tuple[tuple[BBox, ClassDist], ...]
    discarded: tuple[Detection, ...]
    scores: ConsistencyScores
    fates: tuple[str, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not (self.p_bbox or self.p_cls or self.p_soft)


def gen_prediction_sets(teacher: DetectorParams, clip: VideoClip,
                        cell_flows: dict[int, np.ndarray],
                        tau_init: float) -> tuple[PredictionSet, list[PredictionSet]]:
    """Teacher inference on the raw and every flow-warped feature set.

    All predictions are for the key frame. Raw detections below ``tau_init``
    are dropped before scoring; flow-warped sets are kept complete since they
    only serve as match candidates.
    """
    ref_offsets = [j for j in clip.offsets if j != 0]
    if not ref_offsets:
        raise ValueError("consistency is undefined without reference frames")
    if set(ref_offsets) != set(cell_flows):
        raise ValueError(f"flows {sorted(cell_flows)} do not cover "
                         f"references {sorted(ref_offsets)}")
    key_fm = extract_features(clip.key_frame, teacher)
    ref_fms = {j: extract_features(clip.frames[j], teacher) for j in ref_offsets}
    sets = build_feature_sets(key_fm, ref_fms, cell_flows)

    _, raw_dets = forward(sets[0], teacher)
    raw = PredictionSet.make([d for d in raw_dets if d.confidence >= tau_init],
                             offset=None)
    warped = []
    for fset in sets[1:]:
        _, dets = forward(fset, teacher)
        warped.append(PredictionSet.make(dets, offset=fset.source_offset))
    return raw, warped


def match_objects(raw: PredictionSet, flow_warped: PredictionSet) -> list[int | None]:
    """Best-overlap match of each raw detection into one flow-warped set.

    Matching is an independent argmax per raw object (many-to-one allowed);
    ties break to the lower index. An empty flow-warped set matches nothing.
    """
    matches: list[int | None] = []
    for det in raw.detections:
        if not flow_warped.detections:
            matches.append(None)
            continue
        best_idx, best_iou = 0, -1.0
        for idx, candidate in enumerate(flow_warped.detections):
            value = iou(det.bbox, candidate.bbox)
            if value > best_iou:
                best_idx, best_iou = idx, value
        matches.append(best_idx)
    return matches


def score_consistency(raw: PredictionSet, flow_warped: list[PredictionSet],
                      matches: list[list[int | None]],
                      xdiv_penalty: float = XDIV_NONE_PENALTY) -> ConsistencyScores:
    """Mean cross-IoU and cross-divergence over all flow-warped sets.

    A missing match contributes IoU 0 and ``xdiv_penalty``. The mean runs
    over the flow-warped sets actually available, so clipped boundaries with
    fewer references stay well-defined.
    """
    if not flow_warped:
        raise ValueError("at least one flow-warped prediction set is required")
    if len(matches) != len(flow_warped):
        raise ValueError("one match list per flow-warped set required")
    per_object = []
    for k, det in enumerate(raw.detections):
        ious, divs, pairs = [], [], []
        for fw, match_list in zip(flow_warped, matches):
            m = match_list[k]
            pairs.append((fw.offset, m))
            if m is None:
                ious.append(0.0)
                divs.append(xdiv_penalty)
            else:
                other = fw.detections[m]
                ious.append(iou(det.bbox, other.bbox))
                divs.append(kl_divergence(det.class_dist, other.class_dist))
        count = len(flow_warped)
        per_object.append(ObjectScore(
            xiou=sum(ious) / count, xdiv=sum(divs) / count, matches=tuple(pairs)))
    return ConsistencyScores(tuple(per_object))


def select(raw: PredictionSet, scores: ConsistencyScores,
           thresholds: SelectionThresholds) -> PseudoLabelSet:
    """Three-stage partition of the surviving raw detections.

    Boxes with cross-IoU above ``zeta_iou`` become pseudo boxes; detections
    with cross-divergence below ``eta_div`` become hard class labels (box and
    class); confident detections failing both consistency gates keep their
    class distribution as soft labels. The soft conditions are a conjunction,
    which makes the soft set disjoint from both hard sets.
    """
    if len(scores) != len(raw):
        raise ValueError("scores must cover every surviving raw detection")
    p_bbox: list[BBox] = []
    p_cls: list[tuple[BBox, int]] = []
    p_soft: list[tuple[BBox, ClassDist]] = []
    discarded: list[Detection] = []
    fates: list[str] = []
    for det, score in zip(raw.detections, scores.per_object):
        in_bbox = score.xiou > thresholds.zeta_iou
        in_cls = score.xdiv < thresholds.eta_div
        in_soft = (det.confidence > thresholds.gamma_c
                   and score.xdiv > thresholds.eta_div
                   and score.xiou < thresholds.zeta_iou)
        if in_bbox:
            p_bbox.append(det.bbox)
        if in_cls:
            p_cls.append((det.bbox, det.hard_class))
        if in_soft:
            p_soft.append((det.bbox, det.class_dist))
        if in_bbox and in_cls:
            fates.append("bbox+cls")
        elif in_bbox:
            fates.append("bbox")
        elif in_cls:
            fates.append("cls")
        elif in_soft:
            fates.append("soft")
        else:
            fates.append("discarded")
            discarded.append(det)
    return PseudoLabelSet(tuple(p_bbox), tuple(p_cls), tuple(p_soft),
                          tuple(discarded), scores, tuple(fates))


def confidence_only_select(raw: PredictionSet, gamma_c: float) -> list[tuple[BBox, int]]:
    """Baseline gate: keep (box, hard class) for detections above gamma_c."""
    return [(d.bbox, d.hard_class) for d in raw.detections if d.confidence > gamma_c]


def pseudo_label_map(labels_per_frame: list[list[tuple[BBox, int]]],
                     gts_per_frame: list[list], num_classes: int,
                     iou_thresh: float = 0.5) -> float:
    """mAP of hard pseudo-labels treated as confidence-1 detections."""
    dets, gts = [], []
    for frame, (labels, annos) in enumerate(zip(labels_per_frame, gts_per_frame)):
        for box, class_id in labels:
            probs = [0.0] * num_classes
            probs[class_id] = 1.0
            dets.append((frame, Detection.make(box, probs, 1.0)))
        gts.extend((frame, a) for a in annos)
    values = []
    for class_id in range(num_classes):
        ap = average_precision(dets, gts, iou_thresh, class_id)
        if ap is not None:
            values.append(ap)
    return float(sum(values) / len(values)) if values else 0.0


def pseudo_quality(pseudo_sets: list[PseudoLabelSet], gt_sets: list[list],
                   num_classes: int, iou_thresh: float = 0.5) -> dict:
    """Quality report of pseudo-labels against ground truth.

    Reports the pseudo-label mAP of the hard-class set, precision/recall of
    the pseudo boxes at the given IoU, and the accuracy of the hard class
    labels (an entry matching no ground-truth box counts as wrong).
    """
    if len(pseudo_sets) != len(gt_sets):
        raise ValueError("one ground-truth list per pseudo set required")
    pmap = pseudo_label_map([list(p.p_cls) for p in pseudo_sets], gt_sets,
                            num_classes, iou_thresh)

    box_tp = box_total = gt_total = 0
    cls_correct = cls_total = 0
    for pseudo, annos in zip(pseudo_sets, gt_sets):
        gt_total += len(annos)
        taken = [False] * len(annos)
        for box in pseudo.p_bbox:
            box_total += 1
            best, best_v = None, 0.0
            for gi, anno in enumerate(annos):
                value = iou(box, anno.bbox)
                if not taken[gi] and value >= iou_thresh and value > best_v:
                    best, best_v = gi, value
            if best is not None:
                taken[best] = True
                box_tp += 1
        for box, class_id in pseudo.p_cls:
            cls_total += 1
            best, best_v = None, 0.0
            for anno in annos:
                value = iou(box, anno.bbox)
                if value >= iou_thresh and value > best_v:
                    best, best_v = anno, value
            if best is not None and best.class_id == class_id:
                cls_correct += 1
    return {
        "pseudo_map": pmap,
        "bbox_precision": box_tp / box_total if box_total else 0.0,
        "bbox_recall": box_tp / gt_total if gt_total else 0.0,
        "cls_accuracy": cls_correct / cls_total if cls_total else 0.0,
        "counts": {
            "bbox": box_total,
            "cls": cls_total,
            "soft": sum(len(p.p_soft) for p in pseudo_sets),
            "discarded": sum(len(p.discarded) for p in pseudo_sets),
            "ground_truth": gt_total,
        },
    }
