"""Toy differentiable single-stage grid detector with cross-frame aggregation.

One box per cell: each frame is split into a G x G grid of P x P pixel
patches; an affine embedding plus tanh produces per-cell features, reference
features are fused into the key feature by cosine-similarity softmax weights,
and an affine head emits per-cell objectness, class logits, and box
parameters. All gradients are derived analytically; finite differences are
used only as a test oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .core import BBox, Detection, clip_box, nms
from .flow import FeatureSet

PARAMS_MAGIC = b"SVDP"
PARAMS_VERSION = 1

# Center fractions are clamped away from {0, 1} before the logit when
# encoding regression targets.
_ENCODE_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True)
class DetectorConfig:
    """Shape and inference settings of the grid detector."""

    grid: int = 8
    patch: int = 8
    depth: int = 16
    num_classes: int = 5
    agg_temperature: float = 0.5
    decode_floor: float = 0.05
    nms_thresh: float = 0.5
    smooth_l1_beta: float = 1.0
    embed_init_scale: float = 3.5
    objectness_prior_logit: float = -2.0
    # Distillation KL argument order: student distribution first when True.
    soft_student_first: bool = True

    @property
    def frame_px(self) -> int:
        return self.grid * self.patch

    @property
    def cell_px(self) -> float:
        return float(self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def head_dim(self) -> int:
        return 1 + self.num_classes + 4


@dataclass(frozen=True)
class DetectorParams:
    """Learnable weights: patch embedding and prediction head."""

    config: DetectorConfig
    embed_w: np.ndarray  # (patch_dim, depth)
    embed_b: np.ndarray  # (depth,)
    head_w: np.ndarray   # (depth, 1 + C + 4)
    head_b: np.ndarray   # (1 + C + 4,)

    def __post_init__(self) -> None:
        cfg = self.config
        expected = {
            "embed_w": (cfg.patch_dim, cfg.depth),
            "embed_b": (cfg.depth,),
            "head_w": (cfg.depth, cfg.head_dim),
            "head_b": (cfg.head_dim,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @classmethod
    def init(cls, config: DetectorConfig, rng: np.random.Generator) -> "DetectorParams":
        """Random embedding, near-zero head.

        The embedding bias centers the [0, 1] pixel inputs so features of
        unrelated content start near-orthogonal, which keeps the similarity
        weighting in the aggregation discriminative. The objectness bias
        starts negative (prior ~0.12) so the mostly-background grid does not
        drown the rare positive cells early in training; initial confidences
        stay far below any pseudo-label gate.
        """
        scale = config.embed_init_scale / np.sqrt(config.patch_dim)
        embed_w = rng.normal(0.0, scale, size=(config.patch_dim, config.depth))
        head_b = np.zeros(config.head_dim)
        head_b[0] = config.objectness_prior_logit
        return cls(
            config=config,
            embed_w=embed_w,
            embed_b=-0.5 * embed_w.sum(axis=0),
            head_w=np.zeros((config.depth, config.head_dim)),
            head_b=head_b,
        )

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.embed_w, self.embed_b, self.head_w, self.head_b)

    def copy(self) -> "DetectorParams":
        return replace(self, embed_w=self.embed_w.copy(), embed_b=self.embed_b.copy(),
                       head_w=self.head_w.copy(), head_b=self.head_b.copy())

    def save(self, path) -> None:
        cfg = self.config
        header = struct.pack("<4sIIIII", PARAMS_MAGIC, PARAMS_VERSION,
                             cfg.grid, cfg.depth, cfg.num_classes, cfg.patch)
        with open(path, "wb") as fh:
            fh.write(header)
            for tensor in self.tensors():
                fh.write(tensor.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, config: DetectorConfig | None = None) -> "DetectorParams":
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, version, grid, depth, classes, patch = struct.unpack_from("<4sIIIII", blob, 0)
        if magic != PARAMS_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if config is None:
            config = DetectorConfig(grid=grid, patch=patch, depth=depth, num_classes=classes)
        elif (config.grid, config.depth, config.num_classes, config.patch) != (grid, depth, classes, patch):
            raise ValueError("checkpoint shape does not match the detector config")
        flat = np.frombuffer(blob, dtype="<f8", offset=24)
        shapes = [(config.patch_dim, config.depth), (config.depth,),
                  (config.depth, config.head_dim), (config.head_dim,)]
        tensors, pos = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            tensors.append(flat[pos:pos + size].reshape(shape).copy())
            pos += size
        if pos != flat.size:
            raise ValueError("checkpoint payload size mismatch")
        return cls(config, *tensors)


@dataclass(frozen=True)
class ParamGrads:
    """Gradients with the same shapes as the parameter tensors."""

    embed_w: np.ndarray
    embed_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def zeros(cls, config: DetectorConfig) -> "ParamGrads":
        return cls(np.zeros((config.patch_dim, config.depth)), np.zeros(config.depth),
                   np.zeros((config.depth, config.head_dim)), np.zeros(config.head_dim))

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(self.embed_w + other.embed_w, self.embed_b + other.embed_b,
                          self.head_w + other.head_w, self.head_b + other.head_b)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in
                   (self.embed_w, self.embed_b, self.head_w, self.head_b))


@dataclass(frozen=True)
class CellOutputs:
    """Raw head outputs: (G, G, 1 + C + 4) of objectness logit, class logits,
    and (tx, ty, tw, th)."""

    data: np.ndarray

    @property
    def objectness_logits(self) -> np.ndarray:
        return self.data[..., 0]

    def class_logits(self, num_classes: int) -> np.ndarray:
        return self.data[..., 1:1 + num_classes]

    def box_params(self, num_classes: int) -> np.ndarray:
        return self.data[..., 1 + num_classes:]


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, retained for the backward pass."""

    config: DetectorConfig
    params: DetectorParams
    patches: np.ndarray | None  # (S, N, patch_dim); None when members were maps
    features: np.ndarray        # (S, N, D)
    norms: np.ndarray           # (S, N)
    cosines: np.ndarray         # (S, N)
    weights: np.ndarray         # (S, N)
    aggregated: np.ndarray      # (N, D)
    head_out: np.ndarray        # (N, head_dim)
    key_index: int

    @property
    def cell_outputs(self) -> CellOutputs:
        g = self.config.grid
        return CellOutputs(self.head_out.reshape(g, g, -1))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def extract_features(frame: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Per-cell tanh embedding of flattened P x P x 3 patches -> (G, G, D)."""
    flat = _frame_to_patches(frame, params.config)
    cfg = params.config
    feats = np.tanh(flat @ params.embed_w + params.embed_b)
    return feats.reshape(cfg.grid, cfg.grid, cfg.depth)


def _frame_to_patches(frame: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    size = cfg.frame_px
    if frame.shape != (size, size, 3):
        raise ValueError(f"frame shape {frame.shape}, expected ({size}, {size}, 3)")
    g, p = cfg.grid, cfg.patch
    tiled = frame.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
    return tiled.reshape(g * g, cfg.patch_dim).astype(np.float64)


def _aggregate_arrays(features: np.ndarray, key_index: int, temperature: float):
    """Similarity-weighted fusion of (S, N, D) member features.

    Returns (aggregated (N, D), norms, cosines, weights). Zero-norm vectors
    get similarity 0 and still participate through the softmax.
    """
    key = features[key_index]                      # (N, D)
    norms = np.linalg.norm(features, axis=2)       # (S, N)
    key_norm = norms[key_index]                    # (N,)
    dots = np.einsum("nd,snd->sn", key, features)
    denom = key_norm[None, :] * norms
    valid = denom > 0.0
    cosines = np.zeros_like(dots)
    np.divide(dots, denom, out=cosines, where=valid)
    weights = _softmax(cosines / temperature, axis=0)
    aggregated = np.einsum("sn,snd->nd", weights, features)
    return aggregated, norms, cosines, weights


def aggregate(key_fm: np.ndarray, others: list[np.ndarray],
              temperature: float = 0.5) -> np.ndarray:
    """Fuse reference features into the key feature (key included as a member)."""
    members = [key_fm] + list(others)
    shapes = {m.shape for m in members}
    if len(shapes) > 1:
        raise ValueError(f"feature shape mismatch: {shapes}")
    g, _, d = key_fm.shape
    stacked = np.stack([m.reshape(g * g, d) for m in members])
    aggregated, _, _, _ = _aggregate_arrays(stacked, 0, temperature)
    return aggregated.reshape(g, g, d)


def forward_feature_set(feature_set: FeatureSet, params: DetectorParams) -> ForwardCache:
    """Aggregate an existing feature set (raw or flow-warped) and run the head.

    Intended for teacher inference; patch intermediates are absent, so the
    result cannot be used for the backward pass.
    """
    cfg = params.config
    n = cfg.grid * cfg.grid
    stacked = np.stack([m.reshape(n, cfg.depth) for m in feature_set.members])
    return _finish_forward(stacked, None, feature_set.key_index, params)


def forward_frames(frames: list[np.ndarray], key_index: int,
                   params: DetectorParams) -> ForwardCache:
    """Full differentiable forward over raw member frames (student path)."""
    if not 0 <= key_index < len(frames):
        raise ValueError(f"key index {key_index} out of range")
    cfg = params.config
    patches = np.stack([_frame_to_patches(f, cfg) for f in frames])  # (S, N, K)
    features = np.tanh(patches @ params.embed_w + params.embed_b)    # (S, N, D)
    return _finish_forward(features, patches, key_index, params)


def _finish_forward(features: np.ndarray, patches: np.ndarray | None,
                    key_index: int, params: DetectorParams) -> ForwardCache:
    cfg = params.config
    aggregated, norms, cosines, weights = _aggregate_arrays(
        features, key_index, cfg.agg_temperature)
    head_out = aggregated @ params.head_w + params.head_b
    return ForwardCache(config=cfg, params=params, patches=patches,
                        features=features, norms=norms, cosines=cosines,
                        weights=weights, aggregated=aggregated,
                        head_out=head_out, key_index=key_index)


def decode_detections(outputs: CellOutputs, cfg: DetectorConfig) -> list[Detection]:
    """Per-cell decode, confidence floor, NMS, clip."""
    data = outputs.data.reshape(-1, cfg.head_dim)
    n = data.shape[0]
    objectness = _sigmoid(data[:, 0])
    class_probs = _softmax(data[:, 1:1 + cfg.num_classes], axis=1)
    confidence = objectness * class_probs.max(axis=1)

    rows, cols = np.divmod(np.arange(n), cfg.grid)
    cell = cfg.cell_px
    cx = (cols + _sigmoid(data[:, 1 + cfg.num_classes])) * cell
    cy = (rows + _sigmoid(data[:, 2 + cfg.num_classes])) * cell
    bw = np.minimum(np.exp(data[:, 3 + cfg.num_classes]) * cell, cfg.frame_px)
    bh = np.minimum(np.exp(data[:, 4 + cfg.num_classes]) * cell, cfg.frame_px)

    dets = []
    for i in np.flatnonzero(confidence >= cfg.decode_floor):
        box = BBox(cx[i] - bw[i] / 2, cy[i] - bh[i] / 2,
                   cx[i] + bw[i] / 2, cy[i] + bh[i] / 2)
        dets.append(Detection.make(box, class_probs[i], confidence[i]))
    kept = nms(dets, cfg.nms_thresh)
    clipped = []
    for det in kept:
        box = clip_box(det.bbox, cfg.frame_px, cfg.frame_px)
        if box is not None:
            clipped.append(replace(det, bbox=box))
    return clipped


def forward(feature_set: FeatureSet, params: DetectorParams) -> tuple[CellOutputs, list[Detection]]:
    """Inference entry point: feature set -> (head outputs, detections)."""
    cache = forward_feature_set(feature_set, params)
    outputs = cache.cell_outputs
    return outputs, decode_detections(outputs, params.config)


def encode_box(box: BBox, cfg: DetectorConfig) -> tuple[int, int, float, float, float, float]:
    """Target cell and (tx, ty, tw, th) for a box; inverse of the decode."""
    cell = cfg.cell_px
    cx, cy = box.center()
    col = min(max(int(np.floor(cx / cell)), 0), cfg.grid - 1)
    row = min(max(int(np.floor(cy / cell)), 0), cfg.grid - 1)
    fx = np.clip(cx / cell - col, _ENCODE_EPS, 1.0 - _ENCODE_EPS)
    fy = np.clip(cy / cell - row, _ENCODE_EPS, 1.0 - _ENCODE_EPS)
    tx = float(np.log(fx / (1.0 - fx)))
    ty = float(np.log(fy / (1.0 - fy)))
    tw = float(np.log(box.width / cell))
    th = float(np.log(box.height / cell))
    return row, col, tx, ty, tw, th


def decode_cell_box(row: int, col: int, t: np.ndarray, cfg: DetectorConfig) -> BBox:
    """Decode one cell's (tx, ty, tw, th) into a pixel box (no clipping)."""
    cell = cfg.cell_px
    cx = (col + _sigmoid(np.array([t[0]]))[0]) * cell
    cy = (row + _sigmoid(np.array([t[1]]))[0]) * cell
    bw = np.exp(t[2]) * cell
    bh = np.exp(t[3]) * cell
    return BBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)


@dataclass(frozen=True)
class GridTargets:
    """Per-cell assignment produced from boxes: objectness 0/1, regression
    targets where positive, and a class id where one was trusted (-1 none)."""

    objectness: np.ndarray  # (G, G) float 0/1
    positive: np.ndarray    # (G, G) bool
    boxes: np.ndarray       # (G, G, 4) tx, ty, tw, th (valid at positives)
    class_ids: np.ndarray   # (G, G) int, -1 where no trusted class

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(labels: list[tuple[int | None, BBox]],
                   cfg: DetectorConfig) -> GridTargets:
    """Center-cell assignment: the cell containing each box center is positive.

    When two boxes land in one cell the larger-area box wins. A class target
    is recorded only when a trusted class accompanies the box.
    """
    g = cfg.grid
    objectness = np.zeros((g, g))
    positive = np.zeros((g, g), dtype=bool)
    boxes = np.zeros((g, g, 4))
    class_ids = np.full((g, g), -1, dtype=np.int64)
    best_area = np.zeros((g, g))
    for class_id, box in labels:
        row, col, tx, ty, tw, th = encode_box(box, cfg)
        if positive[row, col] and box.area() <= best_area[row, col]:
            continue
        positive[row, col] = True
        objectness[row, col] = 1.0
        boxes[row, col] = (tx, ty, tw, th)
        class_ids[row, col] = -1 if class_id is None else int(class_id)
        best_area[row, col] = box.area()
    return GridTargets(objectness, positive, boxes, class_ids)


@dataclass(frozen=True)
class LossBreakdown:
    """The five loss terms; the total is always their exact sum."""

    sup_cls: float = 0.0
    sup_bbox: float = 0.0
    unsup_cls: float = 0.0
    unsup_bbox: float = 0.0
    unsup_soft: float = 0.0

    @property
    def total(self) -> float:
        return (self.sup_cls + self.sup_bbox + self.unsup_cls
                + self.unsup_bbox + self.unsup_soft)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.sup_cls + other.sup_cls, self.sup_bbox + other.sup_bbox,
            self.unsup_cls + other.unsup_cls, self.unsup_bbox + other.unsup_bbox,
            self.unsup_soft + other.unsup_soft)

    def as_dict(self) -> dict[str, float]:
        return {"sup_cls": self.sup_cls, "sup_bbox": self.sup_bbox,
                "unsup_cls": self.unsup_cls, "unsup_bbox": self.unsup_bbox,
                "unsup_soft": self.unsup_soft, "total": self.total}


def _objectness_bce(head_out: np.ndarray, targets: GridTargets,
                    d_out: np.ndarray) -> float:
    """Mean BCE on objectness over all cells; accumulates into d_out."""
    n = head_out.shape[0]
    logits = head_out[:, 0]
    y = targets.objectness.reshape(n)
    # log(1 + e^-|x|) form keeps both branches stable.
    loss = np.mean(np.logaddexp(0.0, logits) - y * logits)
    d_out[:, 0] += (_sigmoid(logits) - y) / n
    return float(loss)


def _class_ce(head_out: np.ndarray, targets: GridTargets, num_classes: int,
              d_out: np.ndarray) -> float:
    """Mean categorical cross-entropy at cells carrying a class target."""
    n = head_out.shape[0]
    class_ids = targets.class_ids.reshape(n)
    cells = np.flatnonzero(class_ids >= 0)
    if cells.size == 0:
        return 0.0
    logits = head_out[cells, 1:1 + num_classes]
    probs = _softmax(logits, axis=1)
    labels = class_ids[cells]
    picked = probs[np.arange(cells.size), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(cells.size), labels] -= 1.0
    d_out[cells, 1:1 + num_classes] += grad / cells.size
    return loss


def _box_smooth_l1(head_out: np.ndarray, targets: GridTargets, num_classes: int,
                   beta: float, d_out: np.ndarray) -> float:
    """Mean smooth-L1 over the four box parameters at positive cells."""
    n = head_out.shape[0]
    cells = np.flatnonzero(targets.positive.reshape(n))
    if cells.size == 0:
        return 0.0
    pred = head_out[cells, 1 + num_classes:]
    target = targets.boxes.reshape(n, 4)[cells]
    diff = pred - target
    absd = np.abs(diff)
    quad = absd < beta
    vals = np.where(quad, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    grad = np.where(quad, diff / beta, np.sign(diff))
    count = vals.size
    d_out[cells, 1 + num_classes:] += grad / count
    return float(vals.sum() / count)


def _soft_distill(head_out: np.ndarray, soft_matches, cfg: DetectorConfig,
                  d_out: np.ndarray, epsilon: float = 1e-8) -> float:
    """Mean smoothed KL between student class distributions at matched cells
    and the teacher's soft distributions."""
    if not soft_matches:
        return 0.0
    c = cfg.num_classes
    total = 0.0
    for row, col, teacher in soft_matches:
        idx = row * cfg.grid + col
        logits = head_out[idx, 1:1 + c]
        p = _softmax(logits)
        q = np.asarray(teacher, dtype=np.float64)
        if cfg.soft_student_first:
            total += float(np.sum(p * np.log((p + epsilon) / (q + epsilon))))
            dp = np.log((p + epsilon) / (q + epsilon)) + p / (p + epsilon)
        else:
            total += float(np.sum(q * np.log((q + epsilon) / (p + epsilon))))
            dp = -q / (p + epsilon)
        dlogits = p * (dp - np.dot(p, dp))
        d_out[idx, 1:1 + c] += dlogits / len(soft_matches)
    loss = total / len(soft_matches)
    # Smoothing can leave a tiny negative residue when p == q.
    if -1e-6 < loss < 0.0:
        loss = 0.0
    return loss


def compute_losses(cache: ForwardCache,
                   sup_targets: GridTargets | None = None,
                   pseudo_cls_targets: GridTargets | None = None,
                   pseudo_box_targets: GridTargets | None = None,
                   soft_matches: list[tuple[int, int, np.ndarray]] | None = None,
                   ) -> tuple[LossBreakdown, ParamGrads]:
    """Loss terms and analytic parameter gradients for one forward pass.

    Supervised terms come from ``sup_targets``; the unsupervised hard-class,
    box, and soft terms come from the pseudo-label targets and soft matches.
    Absent or empty inputs contribute exactly zero loss and zero gradient.
    All five terms are weighted 1.0.
    """
    cfg = cache.config
    head_out = cache.head_out
    d_out = np.zeros_like(head_out)

    sup_cls = sup_bbox = unsup_cls = unsup_bbox = unsup_soft = 0.0
    if sup_targets is not None:
        sup_cls = _objectness_bce(head_out, sup_targets, d_out)
        sup_cls += _class_ce(head_out, sup_targets, cfg.num_classes, d_out)
        sup_bbox = _box_smooth_l1(head_out, sup_targets, cfg.num_classes,
                                  cfg.smooth_l1_beta, d_out)
    if pseudo_cls_targets is not None and pseudo_cls_targets.num_positive > 0:
        unsup_cls = _objectness_bce(head_out, pseudo_cls_targets, d_out)
        unsup_cls += _class_ce(head_out, pseudo_cls_targets, cfg.num_classes, d_out)
    if pseudo_box_targets is not None and pseudo_box_targets.num_positive > 0:
        unsup_bbox = _objectness_bce(head_out, pseudo_box_targets, d_out)
        unsup_bbox += _box_smooth_l1(head_out, pseudo_box_targets,
                                     cfg.num_classes, cfg.smooth_l1_beta, d_out)
    if soft_matches:
        unsup_soft = _soft_distill(head_out, soft_matches, cfg, d_out)

    grads = backward(cache, d_out)
    breakdown = LossBreakdown(sup_cls, sup_bbox, unsup_cls, unsup_bbox, unsup_soft)
    return breakdown, grads


def backward(cache: ForwardCache, d_out: np.ndarray) -> ParamGrads:
    """Backpropagate d(loss)/d(head outputs) to all parameter tensors."""
    if cache.patches is None:
        raise ValueError("backward requires a frame-based forward cache")
    params = cache.params
    features = cache.features      # (S, N, D)
    weights = cache.weights        # (S, N)
    norms = cache.norms            # (S, N)
    cosines = cache.cosines        # (S, N)
    key_idx = cache.key_index
    tau = cache.config.agg_temperature

    d_head_w = cache.aggregated.T @ d_out
    d_head_b = d_out.sum(axis=0)
    d_agg = d_out @ params.head_w.T                        # (N, D)

    # Aggregation: A = sum_s w_s f_s with w = softmax(cos / tau).
    d_w = np.einsum("nd,snd->sn", d_agg, features)         # dL/dw
    d_features = weights[..., None] * d_agg[None]          # direct f_s path
    weighted_sum = np.einsum("sn,sn->n", weights, d_w)
    d_cos = weights / tau * (d_w - weighted_sum[None, :])

    key = features[key_idx]                                # (N, D)
    key_norm = norms[key_idx]                              # (N,)
    denom = key_norm[None, :] * norms                      # (S, N)
    valid = denom > 0.0
    inv_denom = np.zeros_like(denom)
    np.divide(1.0, denom, out=inv_denom, where=valid)
    inv_norm2 = np.zeros_like(norms)
    np.divide(1.0, norms * norms, out=inv_norm2, where=norms > 0.0)
    inv_key2 = np.zeros_like(key_norm)
    np.divide(1.0, key_norm * key_norm, out=inv_key2, where=key_norm > 0.0)

    coeff = d_cos * valid                                  # zero-sim cells are constant
    d_features += coeff[..., None] * (key[None] * inv_denom[..., None]
                                      - features * (cosines * inv_norm2)[..., None])
    d_key = np.einsum("sn,snd->nd", coeff * inv_denom, features) \
        - (np.einsum("sn,sn->n", coeff, cosines) * inv_key2)[..., None] * key
    d_features[key_idx] += d_key

    d_pre = d_features * (1.0 - features * features)       # through tanh
    d_embed_w = np.einsum("snk,snd->kd", cache.patches, d_pre)
    d_embed_b = d_pre.sum(axis=(0, 1))
    return ParamGrads(d_embed_w, d_embed_b, d_head_w, d_head_b)


def sgd_step(params: DetectorParams, grads: ParamGrads, lr: float) -> DetectorParams:
    """Plain SGD update; aborts on non-finite gradients."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not grads.is_finite():
        raise TrainingDiverged("non-finite gradient encountered")
    return DetectorParams(
        config=params.config,
        embed_w=params.embed_w - lr * grads.embed_w,
        embed_b=params.embed_b - lr * grads.embed_b,
        head_w=params.head_w - lr * grads.head_w,
        head_b=params.head_b - lr * grads.head_b,
    )
