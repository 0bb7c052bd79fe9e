"""Optical-flow fields and feature warping.

Flow fields are oriented key -> reference: the displacement stored at a
key-frame location points at the corresponding reference-frame location, so
features are pulled from the reference by backward warping. Two flow sources
share the interface: analytic flow derived from the generator's motion truth,
and a block-matching estimator on raw frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

FLOW_MAGIC = b"SVFL"


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dx, dy) displacement map for one key-reference pair."""

    data: np.ndarray  # (H, W, 2) float64, [..., 0] = dx, [..., 1] = dy

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow data must be (H, W, 2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow field contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_bytes(self) -> bytes:
        """Serialize: magic "SVFL", u32 W, u32 H, then row-major float32
        (dx, dy) pairs, all little-endian."""
        header = struct.pack("<4sII", FLOW_MAGIC, self.width, self.height)
        return header + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FlowField":
        magic, width, height = struct.unpack_from("<4sII", blob, 0)
        if magic != FLOW_MAGIC:
            raise ValueError(f"bad flow magic {magic!r}")
        body = np.frombuffer(blob, dtype="<f4", offset=12)
        if body.size != height * width * 2:
            raise ValueError("flow blob size mismatch")
        return cls(body.reshape(height, width, 2).astype(np.float64))


def analytic_flow(motion, t: int, j: int, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None) -> FlowField:
    """Ground-truth flow from the generator's motion record.

    Inside each object's ground-truth box at time ``t`` the displacement is
    that object's true displacement over offset ``j``; elsewhere it is the
    camera displacement. Overlapping boxes are painted in object order (later
    objects win). ``motion`` must expose ``num_frames``, ``frame_size`` as
    (height, width), ``camera_displacement(t, j)``, and ``objects`` whose
    items expose ``box(t)`` and ``displacement(t, j)``.
    """
    if not (0 <= t < motion.num_frames and 0 <= t + j < motion.num_frames):
        raise ValueError(f"frame index out of range: t={t}, j={j}")
    height, width = motion.frame_size
    cam_dx, cam_dy = motion.camera_displacement(t, j)
    field = np.empty((height, width, 2), dtype=np.float64)
    field[..., 0] = cam_dx
    field[..., 1] = cam_dy
    for track in motion.objects:
        box = track.box(t)
        dx, dy = track.displacement(t, j)
        c0 = max(0, int(np.floor(box.x1 + 0.5)))
        c1 = min(width, int(np.ceil(box.x2 - 0.5)))
        r0 = max(0, int(np.floor(box.y1 + 0.5)))
        r1 = min(height, int(np.ceil(box.y2 - 0.5)))
        field[r0:r1, c0:c1, 0] = dx
        field[r0:r1, c0:c1, 1] = dy
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        field = field + rng.normal(0.0, noise_sigma, size=field.shape)
    return FlowField(field)


def estimate_flow_block_matching(key: np.ndarray, ref: np.ndarray,
                                 block: int = 8, radius: int = 4) -> FlowField:
    """Integer-displacement flow by exhaustive SSD search per block.

    The key frame is tiled into ``block``-sized blocks (trailing blocks may be
    partial). For each block the displacement in [-radius, radius]^2 that
    minimizes the sum of squared differences against the reference is chosen;
    ties go to the smallest displacement magnitude, then lexicographic
    (dx, dy). Candidates whose reference window leaves the frame are skipped.
    """
    if key.shape != ref.shape:
        raise ValueError(f"frame shape mismatch: {key.shape} vs {ref.shape}")
    if block < 3 or block % 2 == 0:
        raise ValueError(f"block must be odd and >= 3, got {block}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    height, width = key.shape[:2]
    key64 = key.astype(np.float64).reshape(height, width, -1)
    ref64 = ref.astype(np.float64).reshape(height, width, -1)

    row_bounds = np.arange(0, height, block)
    col_bounds = np.arange(0, width, block)
    n_rows, n_cols = len(row_bounds), len(col_bounds)

    candidates = [(dx, dy) for dy in range(-radius, radius + 1)
                  for dx in range(-radius, radius + 1)]
    candidates.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))

    best_ssd = np.full((n_rows, n_cols), np.inf)
    best_dx = np.zeros((n_rows, n_cols))
    best_dy = np.zeros((n_rows, n_cols))
    for dx, dy in candidates:
        # Aligned squared-difference map; out-of-frame samples are +inf so
        # any block touching them is invalid for this candidate.
        diff2 = np.full((height, width), np.inf)
        r0, r1 = max(0, -dy), min(height, height - dy)
        c0, c1 = max(0, -dx), min(width, width - dx)
        if r1 > r0 and c1 > c0:
            d = key64[r0:r1, c0:c1] - ref64[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
            diff2[r0:r1, c0:c1] = np.sum(d * d, axis=-1)
        per_block = np.add.reduceat(
            np.add.reduceat(diff2, row_bounds, axis=0), col_bounds, axis=1)
        better = per_block < best_ssd
        best_ssd[better] = per_block[better]
        best_dx[better] = dx
        best_dy[better] = dy

    field = np.zeros((height, width, 2), dtype=np.float64)
    for bi, r0 in enumerate(row_bounds):
        for bj, c0 in enumerate(col_bounds):
            field[r0:r0 + block, c0:c0 + block, 0] = best_dx[bi, bj]
            field[r0:r0 + block, c0:c0 + block, 1] = best_dy[bi, bj]
    return FlowField(field)


def flip_flow(flow: FlowField) -> FlowField:
    """Flow field of the horizontally mirrored clip."""
    mirrored = flow.data[:, ::-1].copy()
    mirrored[..., 0] = -mirrored[..., 0]
    return FlowField(mirrored)


def downsample_flow(flow: FlowField, grid: int) -> np.ndarray:
    """Cell-level flow: mean pixel displacement per cell, in cell units."""
    height, width = flow.height, flow.width
    if height % grid or width % grid:
        raise ValueError(f"frame {height}x{width} not divisible by grid {grid}")
    cell_h, cell_w = height // grid, width // grid
    cells = flow.data.reshape(grid, cell_h, grid, cell_w, 2).mean(axis=(1, 3))
    cells[..., 0] /= cell_w
    cells[..., 1] /= cell_h
    return cells


def warp_feature(ref_fm: np.ndarray, cell_flow: np.ndarray) -> np.ndarray:
    """Backward-warp a feature map by a cell-level flow.

    The output at cell p is the bilinear sample of ``ref_fm`` at
    p + cell_flow(p); samples outside the grid contribute zero.
    """
    grid = ref_fm.shape[0]
    if ref_fm.shape[:2] != (grid, grid) or cell_flow.shape != (grid, grid, 2):
        raise ValueError(
            f"grid mismatch: features {ref_fm.shape}, flow {cell_flow.shape}")
    rows, cols = np.mgrid[0:grid, 0:grid]
    sx = cols + cell_flow[..., 0]
    sy = rows + cell_flow[..., 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros_like(ref_fm, dtype=np.float64)
    corners = ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
               (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx))
    for yy, xx, weight in corners:
        valid = (yy >= 0) & (yy < grid) & (xx >= 0) & (xx < grid)
        yc = np.clip(yy, 0, grid - 1)
        xc = np.clip(xx, 0, grid - 1)
        out += np.where(valid, weight, 0.0)[..., None] * ref_fm[yc, xc]
    return out


@dataclass(frozen=True)
class FeatureSet:
    """Ordered group of per-frame features with one designated key slot.

    Members are ordered by reference offset with the key at offset 0.
    ``source_offset`` is None for the raw set (true key feature in the key
    slot) and the reference offset j for a flow-warped set (key slot holds
    the warped feature of reference j).
    """

    members: tuple[np.ndarray, ...]
    offsets: tuple[int, ...]
    source_offset: int | None = None

    def __post_init__(self) -> None:
        if len(self.members) != len(self.offsets):
            raise ValueError("one offset per member required")
        if self.offsets.count(0) != 1:
            raise ValueError("exactly one key slot (offset 0) required")
        shapes = {m.shape for m in self.members}
        if len(shapes) > 1:
            raise ValueError(f"member shape mismatch: {shapes}")

    @property
    def key_index(self) -> int:
        return self.offsets.index(0)

    @property
    def key_feature(self) -> np.ndarray:
        return self.members[self.key_index]

    @property
    def is_raw(self) -> bool:
        return self.source_offset is None


def build_feature_sets(key_fm: np.ndarray,
                       ref_fms: Mapping[int, np.ndarray],
                       cell_flows: Mapping[int, np.ndarray]) -> list[FeatureSet]:
    """Raw plus one flow-warped feature set per reference.

    The raw set keeps the true key feature; each flow-warped set keeps every
    reference feature unchanged and replaces the key slot with the backward
    warp of that reference's feature. With r references the result has
    exactly 1 + r sets, raw first, then warped sets in offset order.
    """
    if set(ref_fms) != set(cell_flows):
        raise ValueError(
            f"reference/flow offset mismatch: {sorted(ref_fms)} vs {sorted(cell_flows)}")
    if 0 in ref_fms:
        raise ValueError("reference offsets must be nonzero")
    offsets = tuple(sorted(ref_fms) + [0])
    offsets = tuple(sorted(offsets))

    def members_with_key(key_slot: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(key_slot if j == 0 else ref_fms[j] for j in offsets)

    sets = [FeatureSet(members_with_key(key_fm), offsets, source_offset=None)]
    for j in sorted(ref_fms):
        warped = warp_feature(ref_fms[j], cell_flows[j])
        sets.append(FeatureSet(members_with_key(warped), offsets, source_offset=j))
    return sets
