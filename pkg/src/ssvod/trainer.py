"""End-to-end teacher-student training.

Each step processes one labeled and one unlabeled set. The teacher (an
exponential moving average of the student) sees the weakly augmented
unlabeled set and produces pseudo-labels via the three-stage selection; the
labels are mapped into the strongly augmented frame the student trains on.
The student additionally minimizes the supervised losses on a strongly
augmented labeled set, and a single SGD step uses the unweighted sum of all
five loss terms.

One augmentation record is shared by every frame of a set, and training is a
pure function of (dataset bytes, config): all randomness flows through one
seeded generator in a fixed draw order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Annotation, BBox, clip_box
from .detector import (
    DetectorConfig,
    DetectorParams,
    LossBreakdown,
    TrainingDiverged,
    assign_targets,
    compute_losses,
    encode_box,
    forward_frames,
    sgd_step,
)
from .flow import analytic_flow, downsample_flow, estimate_flow_block_matching, flip_flow
from .pseudo import (
    PseudoLabelSet,
    SelectionThresholds,
    gen_prediction_sets,
    match_objects,
    score_consistency,
    select,
)
from .synthdata import Dataset, SparsityAssignment, VideoClip, load_clip

FLIP_PROB = 0.5
BRIGHTNESS_PROB = 0.1
BRIGHTNESS_DELTA = 0.2
CONTRAST_PROB = 0.1
CONTRAST_RANGE = (0.6, 1.4)
TRANSLATE_PROB = 0.3
TRANSLATE_RATIO = 0.1
CUTOUT_PROB = 0.5
CUTOUT_COUNT = (1, 5)
CUTOUT_SIDE_RATIO = (0.02, 0.2)


@dataclass(frozen=True)
class AugmentRecord:
    """One set's augmentation: geometric part (flip, translate) is invertible;
    photometric jitter and cutout never touch box coordinates."""

    flip: bool = False
    translate: tuple[int, int] = (0, 0)
    cutout: tuple[tuple[int, int, int, int], ...] = ()  # (x1, y1, x2, y2) px
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (not self.flip and self.translate == (0, 0) and not self.cutout
                and self.brightness == 0.0 and self.contrast == 1.0)


def apply_record_to_frame(frame: np.ndarray, record: AugmentRecord) -> np.ndarray:
    """Flip, integer-translate with zero fill, photometric clamp, cutout."""
    out = frame[:, ::-1] if record.flip else frame
    dx, dy = record.translate
    if dx or dy:
        h, w = out.shape[:2]
        shifted = np.zeros_like(out)
        r0, r1 = max(0, -dy), min(h, h - dy)
        c0, c1 = max(0, -dx), min(w, w - dx)
        if r1 > r0 and c1 > c0:
            shifted[r0 + dy:r1 + dy, c0 + dx:c1 + dx] = out[r0:r1, c0:c1]
        out = shifted
    else:
        out = out.copy()
    if record.brightness != 0.0 or record.contrast != 1.0:
        out = np.clip((out - 0.5) * record.contrast + 0.5 + record.brightness,
                      0.0, 1.0)
    for x1, y1, x2, y2 in record.cutout:
        out[y1:y2, x1:x2] = 0.0
    return out


def _geom_forward(box: BBox, record: AugmentRecord, width: float) -> BBox:
    if record.flip:
        box = BBox(width - box.x2, box.y1, width - box.x1, box.y2)
    dx, dy = record.translate
    if dx or dy:
        box = box.shifted(dx, dy)
    return box


def _geom_inverse(box: BBox, record: AugmentRecord, width: float) -> BBox:
    dx, dy = record.translate
    if dx or dy:
        box = box.shifted(-dx, -dy)
    if record.flip:
        box = BBox(width - box.x2, box.y1, width - box.x1, box.y2)
    return box


def apply_record_to_box(box: BBox, record: AugmentRecord, width: float,
                        height: float) -> BBox | None:
    """Geometric transform plus frame clipping; None when clipped away."""
    return clip_box(_geom_forward(box, record, width), width, height)


def _apply_to_clip(clip: VideoClip, record: AugmentRecord) -> VideoClip:
    frames = {j: apply_record_to_frame(f, record) for j, f in clip.frames.items()}
    annotations = None
    if clip.annotations is not None:
        height, width = clip.frames[0].shape[:2]
        annotations = []
        for anno in clip.annotations:
            box = apply_record_to_box(anno.bbox, record, width, height)
            if box is not None:
                annotations.append(Annotation(anno.class_id, box))
    return replace(clip, frames=frames, annotations=annotations)


def augment_weak(clip: VideoClip, rng: np.random.Generator,
                 ) -> tuple[VideoClip, AugmentRecord]:
    """Horizontal flip with probability 1/2, shared by all frames of the set."""
    record = AugmentRecord(flip=bool(rng.random() < FLIP_PROB))
    return _apply_to_clip(clip, record), record


def augment_strong(clip: VideoClip, rng: np.random.Generator,
                   ) -> tuple[VideoClip, AugmentRecord]:
    """Flip, photometric jitter, translation, and cutout, one record per set.

    Draw order is fixed: flip, brightness, contrast, translation, cutout.
    Boxes that clipping collapses after translation are dropped from the
    labels; cutout rectangles never alter box coordinates.
    """
    height, width = clip.frames[0].shape[:2]
    flip = bool(rng.random() < FLIP_PROB)
    brightness = 0.0
    if rng.random() < BRIGHTNESS_PROB:
        brightness = float(rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA))
    contrast = 1.0
    if rng.random() < CONTRAST_PROB:
        contrast = float(rng.uniform(*CONTRAST_RANGE))
    translate = (0, 0)
    if rng.random() < TRANSLATE_PROB:
        ratios = rng.uniform(-TRANSLATE_RATIO, TRANSLATE_RATIO, size=2)
        translate = (int(round(ratios[0] * width)), int(round(ratios[1] * height)))
    cutout: list[tuple[int, int, int, int]] = []
    if rng.random() < CUTOUT_PROB:
        count = int(rng.integers(CUTOUT_COUNT[0], CUTOUT_COUNT[1] + 1))
        for _ in range(count):
            rw = max(1, int(rng.uniform(*CUTOUT_SIDE_RATIO) * width))
            rh = max(1, int(rng.uniform(*CUTOUT_SIDE_RATIO) * height))
            x1 = int(rng.integers(0, width - rw + 1))
            y1 = int(rng.integers(0, height - rh + 1))
            cutout.append((x1, y1, x1 + rw, y1 + rh))
    record = AugmentRecord(flip=flip, translate=translate, cutout=tuple(cutout),
                           brightness=brightness, contrast=contrast)
    return _apply_to_clip(clip, record), record


def map_pseudo_labels(pseudo: PseudoLabelSet, weak: AugmentRecord,
                      strong: AugmentRecord, width: float, height: float,
                      ) -> PseudoLabelSet:
    """Move pseudo-label boxes from the weak frame into the strong frame.

    Applies the inverse of the weak geometry, then the strong geometry, then
    clips; boxes that collapse are dropped. Class distributions are
    untouched. Scores and fates keep describing the weak-frame detections.
    """
    def remap(box: BBox) -> BBox | None:
        return clip_box(_geom_forward(_geom_inverse(box, weak, width),
                                      strong, width), width, height)

    p_bbox = tuple(b for b in map(remap, pseudo.p_bbox) if b is not None)
    p_cls = tuple((b, c) for b, c in
                  ((remap(box), cls) for box, cls in pseudo.p_cls) if b is not None)
    p_soft = tuple((b, d) for b, d in
                   ((remap(box), dist) for box, dist in pseudo.p_soft) if b is not None)
    return replace(pseudo, p_bbox=p_bbox, p_cls=p_cls, p_soft=p_soft)


def ema_update(teacher: DetectorParams, student: DetectorParams,
               momentum: float) -> DetectorParams:
    """Exponential moving average: teacher <- m * teacher + (1 - m) * student."""
    if not (0.0 < momentum < 1.0):
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    if teacher.config != student.config:
        raise ValueError("teacher/student shape mismatch")
    m = momentum
    return DetectorParams(
        config=teacher.config,
        embed_w=m * teacher.embed_w + (1 - m) * student.embed_w,
        embed_b=m * teacher.embed_b + (1 - m) * student.embed_b,
        head_w=m * teacher.head_w + (1 - m) * student.head_w,
        head_b=m * teacher.head_b + (1 - m) * student.head_b,
    )


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters; the defaults are the artifact's standard
    recipe (SGD lr 0.005, EMA momentum 0.99, 2 references per set, reference
    offsets within [-9, 9], 1 labeled + 1 unlabeled set per step)."""

    iterations: int = 5000
    lr: float = 0.005
    ema_momentum: float = 0.99
    refs_per_set: int = 2
    ref_range: int = 9
    thresholds: SelectionThresholds = field(default_factory=SelectionThresholds)
    seed: int = 0
    use_unsup_cls: bool = True
    use_unsup_bbox: bool = True
    use_unsup_soft: bool = True
    flow_source: str = "analytic"       # "analytic" or "block"
    flow_noise_sigma: float = 0.5       # px, analytic flow only
    block_size: int = 5
    block_radius: int = 4
    checkpoint_every: int = 1000

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0.0 < self.ema_momentum < 1.0):
            raise ValueError("ema_momentum must be in (0, 1)")
        if self.flow_source not in ("analytic", "block"):
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        if self.refs_per_set < 1 or self.ref_range < 1:
            raise ValueError("need at least one reference within a positive range")


def teacher_cell_flows(clip_weak: VideoClip, weak_record: AugmentRecord,
                       cfg: TrainConfig, grid: int,
                       rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Cell-level flows for the weakly augmented clip, from either source.

    Analytic flow is computed in original video coordinates and mirrored when
    the weak record flipped the clip; block matching runs directly on the
    augmented frames.
    """
    flows: dict[int, np.ndarray] = {}
    for j in clip_weak.offsets:
        if cfg.flow_source == "analytic":
            fld = analytic_flow(clip_weak.motion, clip_weak.key_t, j,
                                noise_sigma=cfg.flow_noise_sigma, rng=rng)
            if weak_record.flip:
                fld = flip_flow(fld)
        else:
            fld = estimate_flow_block_matching(
                clip_weak.key_frame, clip_weak.frames[j],
                block=cfg.block_size, radius=cfg.block_radius)
        flows[j] = downsample_flow(fld, grid)
    return flows


def _pseudo_inputs(mapped: PseudoLabelSet, cfg: TrainConfig,
                   det_cfg: DetectorConfig):
    cls_targets = box_targets = None
    soft_matches: list[tuple[int, int, np.ndarray]] = []
    if cfg.use_unsup_cls and mapped.p_cls:
        cls_targets = assign_targets([(c, b) for b, c in mapped.p_cls], det_cfg)
    if cfg.use_unsup_bbox and mapped.p_bbox:
        box_targets = assign_targets([(None, b) for b in mapped.p_bbox], det_cfg)
    if cfg.use_unsup_soft:
        for box, dist in mapped.p_soft:
            row, col, *_ = encode_box(box, det_cfg)
            soft_matches.append((row, col, dist.probs))
    return cls_targets, box_targets, soft_matches


def _student_cache(clip: VideoClip, params: DetectorParams):
    offsets = sorted(clip.frames)
    frames = [clip.frames[j] for j in offsets]
    return forward_frames(frames, offsets.index(0), params)


def train_step(student: DetectorParams, teacher: DetectorParams,
               labeled_clip: VideoClip, unlabeled_clip: VideoClip | None,
               cfg: TrainConfig, rng: np.random.Generator,
               ) -> tuple[DetectorParams, DetectorParams, LossBreakdown]:
    """One optimization step; ``unlabeled_clip`` None means supervised-only.

    Pipeline: teacher pseudo-labels on the weak unlabeled set, coordinate
    mapping into the strong frame, student losses on the strong labeled and
    strong unlabeled sets, one SGD step on the total, then the EMA update.
    """
    det_cfg = student.config
    pseudo_cls = pseudo_box = None
    soft_matches: list[tuple[int, int, np.ndarray]] = []
    strong_unlab = None

    if unlabeled_clip is not None:
        weak_unlab, weak_rec = augment_weak(unlabeled_clip, rng)
        cell_flows = teacher_cell_flows(weak_unlab, weak_rec, cfg,
                                        det_cfg.grid, rng)
        raw, warped = gen_prediction_sets(teacher, weak_unlab, cell_flows,
                                          cfg.thresholds.tau_init)
        if len(raw):
            matches = [match_objects(raw, fw) for fw in warped]
            scores = score_consistency(raw, warped, matches)
            pseudo = select(raw, scores, cfg.thresholds)
        else:
            pseudo = None
        strong_unlab, strong_rec = augment_strong(unlabeled_clip, rng)
        if pseudo is not None:
            height, width = unlabeled_clip.frames[0].shape[:2]
            mapped = map_pseudo_labels(pseudo, weak_rec, strong_rec, width, height)
            pseudo_cls, pseudo_box, soft_matches = _pseudo_inputs(mapped, cfg, det_cfg)

    strong_lab, _ = augment_strong(labeled_clip, rng)
    sup_targets = assign_targets(
        [(a.class_id, a.bbox) for a in strong_lab.annotations or []], det_cfg)

    lab_cache = _student_cache(strong_lab, student)
    breakdown, grads = compute_losses(lab_cache, sup_targets=sup_targets)
    if strong_unlab is not None and (pseudo_cls or pseudo_box or soft_matches):
        unlab_cache = _student_cache(strong_unlab, student)
        unsup_breakdown, unsup_grads = compute_losses(
            unlab_cache, pseudo_cls_targets=pseudo_cls,
            pseudo_box_targets=pseudo_box, soft_matches=soft_matches)
        breakdown = breakdown + unsup_breakdown
        grads = grads + unsup_grads

    if not math.isfinite(breakdown.total):
        raise TrainingDiverged(f"non-finite loss: {breakdown.as_dict()}")
    new_student = sgd_step(student, grads, cfg.lr)
    new_teacher = ema_update(teacher, new_student, cfg.ema_momentum)
    return new_student, new_teacher, breakdown


@dataclass
class TrainResult:
    student: DetectorParams
    teacher: DetectorParams
    history: list[LossBreakdown]


HISTORY_COLUMNS = ("iteration", "sup_cls", "sup_bbox", "unsup_cls",
                   "unsup_bbox", "unsup_soft", "total")


def write_history(history: list[LossBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for it, row in enumerate(history):
            d = row.as_dict()
            writer.writerow([it] + [repr(d[c]) for c in HISTORY_COLUMNS[1:]])


def _sample_clip(dataset: Dataset, pool: list[tuple[int, int]],
                 cfg: TrainConfig, rng: np.random.Generator,
                 with_annotations: bool) -> VideoClip:
    video, t = pool[int(rng.integers(0, len(pool)))]
    candidates = [j for j in range(-cfg.ref_range, cfg.ref_range + 1) if j != 0]
    picks = rng.choice(len(candidates), size=cfg.refs_per_set, replace=False)
    offsets = [candidates[int(i)] for i in picks]
    return load_clip(dataset, video, t, offsets, ref_range=cfg.ref_range,
                     rng=rng, with_annotations=with_annotations)


def train(dataset: Dataset, det_cfg: DetectorConfig, cfg: TrainConfig,
          mode: str, assignment: SparsityAssignment,
          out_dir=None) -> TrainResult:
    """Full training run in "supervised" or "ssvod" mode.

    Supervised mode iterates labeled sets only; ssvod mode adds one unlabeled
    set per step. When ``out_dir`` is given, history.csv and periodic
    student/teacher checkpoints are written there.
    """
    if mode not in ("supervised", "ssvod"):
        raise ValueError(f"unknown mode {mode!r}")
    labeled_pool = [(v, t) for v, ts in sorted(assignment.labeled.items())
                    for t in ts]
    unlabeled_pool = [(v, t) for v, ts in sorted(assignment.unlabeled.items())
                      for t in ts]
    if not labeled_pool:
        raise ValueError("empty labeled pool")
    if mode == "ssvod" and not unlabeled_pool:
        raise ValueError("ssvod mode requires unlabeled key frames")

    rng = np.random.default_rng(cfg.seed)
    student = DetectorParams.init(det_cfg, rng)
    teacher = student.copy()
    history: list[LossBreakdown] = []

    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.iterations):
        labeled_clip = _sample_clip(dataset, labeled_pool, cfg, rng,
                                    with_annotations=True)
        unlabeled_clip = None
        if mode == "ssvod":
            unlabeled_clip = _sample_clip(dataset, unlabeled_pool, cfg, rng,
                                          with_annotations=False)
        student, teacher, breakdown = train_step(
            student, teacher, labeled_clip, unlabeled_clip, cfg, rng)
        history.append(breakdown)
        if run_dir is not None and cfg.checkpoint_every > 0 \
                and (it + 1) % cfg.checkpoint_every == 0:
            student.save(run_dir / f"student_{it + 1:04d}.svdp")
            teacher.save(run_dir / f"teacher_{it + 1:04d}.svdp")

    if run_dir is not None:
        student.save(run_dir / "student_final.svdp")
        teacher.save(run_dir / "teacher_final.svdp")
        write_history(history, run_dir / "history.csv")
    return TrainResult(student=student, teacher=teacher, history=history)
