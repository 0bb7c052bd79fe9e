"""Domain types and geometric/probabilistic primitives shared by all modules.

Conventions used everywhere: boxes are corner-form floats ``[x1, y1, x2, y2]``
in pixel units with the origin at the top-left, ``x`` along columns and ``y``
along rows. Class distributions are over the ``C`` foreground classes only.
All operations here are pure functions on immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Smoothing added to both arguments of the KL divergence before the log, so
#: distributions with exact zeros (common in detector outputs) stay finite.
KL_EPSILON = 1e-8


@dataclass(frozen=True)
class BBox:
    """Axis-aligned bounding box, corner form, pixel units."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True, eq=False)
class ClassDist:
    """Probability distribution over the foreground classes.

    Entries must be nonnegative and sum to 1 within 1e-9.
    """

    probs: np.ndarray

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ClassDist) and np.array_equal(self.probs, other.probs)

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("class distribution must be a nonempty vector")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("class probabilities must be finite and >= 0")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"class probabilities sum to {probs.sum()}, not 1")
        probs = probs.copy()
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.probs.size)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class Detection:
    """One detected object: box, class distribution, scalar confidence.

    The scalar confidence is objectness times the max class probability;
    ``hard_class`` is always the argmax of ``class_dist``.
    """

    bbox: BBox
    class_dist: ClassDist
    confidence: float
    hard_class: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.hard_class != self.class_dist.argmax:
            raise ValueError("hard_class must be the argmax of class_dist")

    @classmethod
    def make(cls, bbox: BBox, probs: np.ndarray, confidence: float) -> "Detection":
        dist = ClassDist(np.asarray(probs, dtype=np.float64))
        return cls(bbox=bbox, class_dist=dist, confidence=float(confidence),
                   hard_class=dist.argmax)


@dataclass(frozen=True)
class Annotation:
    """Ground-truth object: class id plus box (clipped to frame bounds)."""

    class_id: int
    bbox: BBox

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class PredictionSet:
    """Key-frame detections from one feature set, sorted by confidence.

    ``offset`` is ``None`` for the raw set and the reference offset ``j`` for
    a flow-warped set.
    """

    detections: tuple[Detection, ...]
    offset: int | None = None

    def __post_init__(self) -> None:
        confs = [d.confidence for d in self.detections]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("detections must be sorted by descending confidence")

    @classmethod
    def make(cls, detections, offset: int | None = None) -> "PredictionSet":
        ordered = sorted(detections, key=lambda d: -d.confidence)
        return cls(detections=tuple(ordered), offset=offset)

    @property
    def is_raw(self) -> bool:
        return self.offset is None

    def __len__(self) -> int:
        return len(self.detections)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint, symmetric."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


def kl_divergence(p: ClassDist, q: ClassDist, epsilon: float = KL_EPSILON) -> float:
    """Smoothed KL divergence sum_i p_i * ln((p_i + eps) / (q_i + eps)).

    The smoothing keeps the value finite when either distribution contains
    exact zeros; it introduces an error below 1e-6 for the epsilon default.

    Raises:
        ValueError: if the distributions have different lengths.
    """
    if len(p) != len(q):
        raise ValueError(f"distribution length mismatch: {len(p)} vs {len(q)}")
    pp = p.probs + epsilon
    qq = q.probs + epsilon
    return float(np.sum(p.probs * np.log(pp / qq)))


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression by descending confidence.

    Ties on equal confidence are broken by earlier list index. Survivors never
    share IoU strictly above ``iou_thresh``; output is sorted by confidence.
    """
    if not (0.0 < iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh {iou_thresh} outside (0, 1]")
    ordered = sorted(dets, key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for det in ordered:
        if all(iou(det.bbox, survivor.bbox) <= iou_thresh for survivor in kept):
            kept.append(det)
    return kept


def clip_box(b: BBox, width: float, height: float) -> BBox | None:
    """Clamp a box to ``[0, width] x [0, height]``.

    Returns ``None`` when clamping collapses the box (the caller drops the
    detection).
    """
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    x1 = min(max(b.x1, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return BBox(x1, y1, x2, y2)
