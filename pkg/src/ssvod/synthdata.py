"""Deterministic synthetic video generator with exact ground truth.

Videos show class-distinct moving shapes on a textured background. Classes
come in visually confusable pairs (same shape and color, different fill
texture) so classification errors actually occur downstream. Fast objects are
rendered with a linear smear along their velocity, degrading appearance the
way fast motion does. Everything is reproducible byte-for-byte from one seed.

Dataset layout on disk::

    meta.json                     M, N, H, W, C, seed, spec echo
    video_%04d/frame_%04d.ppm     binary 8-bit P6 frames
    video_%04d/annotations.json   per-frame boxes, key frames, default labels
    video_%04d/motion.json        per-object trajectories + camera velocity
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BBox

# class id -> (shape, textured, rgb). Pairs (0, 1) and (2, 3) share shape and
# color and differ only in texture.
CLASS_STYLES = (
    ("rect", False, (0.85, 0.25, 0.20)),
    ("rect", True, (0.85, 0.25, 0.20)),
    ("ellipse", False, (0.20, 0.45, 0.85)),
    ("ellipse", True, (0.20, 0.45, 0.85)),
    ("wedge", False, (0.92, 0.78, 0.22)),
)

_STRIPE_PERIOD = 3
_STRIPE_DIM = 0.45
# Radial brightness falloff from the object center; gives interior pixels a
# position-within-object cue so box extent is locally inferable.
_SHADE_STRENGTH = 0.45


@dataclass(frozen=True)
class VideoSpec:
    """Generator settings for one dataset."""

    num_frames: int = 31
    height: int = 64
    width: int = 64
    num_classes: int = 5
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 7
    max_size: int = 24
    max_speed: int = 3            # integer px/frame per axis
    static_fraction: float = 0.25
    accel_range: float = 0.0      # per-frame^2, 0 disables acceleration
    noise_sigma: float = 0.02     # appearance noise on [0, 1] frames
    blur_scale: float = 4.0       # smear fraction = clamp(speed / blur_scale, 0, 1)
    camera_velocity: tuple[int, int] = (0, 0)
    key_frames: int = 15

    def validate(self) -> None:
        if self.num_frames < 3:
            raise ValueError("videos need at least 3 frames")
        if self.num_classes > len(CLASS_STYLES):
            raise ValueError(f"at most {len(CLASS_STYLES)} classes supported")
        if not (0 < self.min_objects <= self.max_objects):
            raise ValueError("bad objects-per-video range")
        if self.max_size + 2 * self.max_speed >= min(self.height, self.width):
            raise ValueError("objects cannot be kept inside the frame")
        if not (0 < self.key_frames <= self.num_frames):
            raise ValueError("bad key-frame count")


@dataclass(frozen=True)
class SparsityPlan:
    """Which key frames carry annotations during training.

    ``labeled_per_video`` is 1 in the single-frame regime and 5/10/15 in the
    multi-frame regime. ``video_fraction`` selects the subset of videos that
    participates at all. ``unlabeled_per_video`` caps how many of the
    remaining key frames are used as unlabeled ones (None keeps all).
    """

    labeled_per_video: int = 1
    video_fraction: float = 1.0
    unlabeled_per_video: int | None = None
    seed: int = 0

    def validate(self, key_frames: int) -> None:
        if not (1 <= self.labeled_per_video <= key_frames):
            raise ValueError(
                f"labeled_per_video {self.labeled_per_video} not in [1, {key_frames}]")
        if not (0.0 < self.video_fraction <= 1.0):
            raise ValueError("video_fraction must be in (0, 1]")
        if self.unlabeled_per_video is not None and self.unlabeled_per_video < 0:
            raise ValueError("unlabeled_per_video must be >= 0")


class ObjectMotion:
    """Trajectory of one object: per-frame ground-truth boxes and positions."""

    def __init__(self, class_id: int, positions: np.ndarray, boxes: list[BBox]):
        self.class_id = class_id
        self.positions = np.asarray(positions, dtype=np.float64)
        self.boxes = boxes

    def box(self, t: int) -> BBox:
        return self.boxes[t]

    def displacement(self, t: int, j: int) -> tuple[float, float]:
        delta = self.positions[t + j] - self.positions[t]
        return (float(delta[0]), float(delta[1]))


class MotionTruth:
    """Per-video motion record consumed by the analytic flow source."""

    def __init__(self, num_frames: int, frame_size: tuple[int, int],
                 camera_velocity: tuple[float, float], objects: list[ObjectMotion]):
        self.num_frames = num_frames
        self.frame_size = frame_size
        self.camera_velocity = camera_velocity
        self.objects = objects

    def camera_displacement(self, t: int, j: int) -> tuple[float, float]:
        # Apparent background motion is opposite to the camera pan.
        return (-self.camera_velocity[0] * j, -self.camera_velocity[1] * j)


@dataclass
class VideoData:
    """One generated video held in memory."""

    frames: np.ndarray                 # (N, H, W, 3) uint8
    annotations: list[list[Annotation]]
    motion: MotionTruth
    key_frames: list[int]
    masks: list[list[np.ndarray]] | None = None  # per frame, per object, bool


def _smooth_noise(rng: np.random.Generator, height: int, width: int,
                  scale: int = 8) -> np.ndarray:
    """Bilinearly upsampled random grid: a static, matchable texture."""
    gh, gw = height // scale + 2, width // scale + 2
    grid = rng.random((gh, gw, 3))
    ys = np.arange(height) / scale
    xs = np.arange(width) / scale
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return ((1 - fy) * (1 - fx) * g00 + (1 - fy) * fx * g01
            + fy * (1 - fx) * g10 + fy * fx * g11)


def _shape_alpha(kind: str, pos: np.ndarray, size: tuple[float, float],
                 window) -> np.ndarray:
    """Boolean mask of the shape at float position inside a pixel window."""
    r0, r1, c0, c1 = window
    ys = np.arange(r0, r1)[:, None] + 0.5 - pos[1]
    xs = np.arange(c0, c1)[None, :] + 0.5 - pos[0]
    w, h = size
    if kind == "rect":
        return (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    if kind == "ellipse":
        nx = (xs - w / 2) / (w / 2)
        ny = (ys - h / 2) / (h / 2)
        return nx * nx + ny * ny <= 1.0
    if kind == "wedge":
        # Trapezoid: narrow flat top, full-width base; every row is wide
        # enough to rasterize robustly.
        inside_y = (ys >= 0) & (ys < h)
        half_width = w * (0.2 + 0.3 * np.clip(ys / h, 0.0, 1.0))
        return inside_y & (np.abs(xs - w / 2) <= half_width)
    raise ValueError(f"unknown shape {kind!r}")


def _object_texture(class_id: int, base_rgb: np.ndarray, pos: np.ndarray,
                    size: tuple[float, float], window) -> np.ndarray:
    """Per-pixel RGB of the object, in object-local coordinates so the
    pattern translates with the object. A radial brightness falloff toward
    the edges makes the object extent locally visible."""
    r0, r1, c0, c1 = window
    shape = (r1 - r0, c1 - c0, 3)
    color = np.broadcast_to(base_rgb, shape).copy()
    if CLASS_STYLES[class_id][1]:
        lys = np.floor(np.arange(r0, r1)[:, None] + 0.5 - pos[1]).astype(np.int64)
        lxs = np.floor(np.arange(c0, c1)[None, :] + 0.5 - pos[0]).astype(np.int64)
        stripe = ((lxs + lys) // _STRIPE_PERIOD) % 2 == 1
        color[stripe] *= _STRIPE_DIM
    w, h = size
    fy = (np.arange(r0, r1)[:, None] + 0.5 - pos[1] - h / 2) / (h / 2)
    fx = (np.arange(c0, c1)[None, :] + 0.5 - pos[0] - w / 2) / (w / 2)
    radius = np.sqrt(np.clip(fx * fx + fy * fy, 0.0, 2.0))
    shade = 1.0 - _SHADE_STRENGTH * np.clip(radius, 0.0, 1.0)
    return color * shade[..., None]


@dataclass
class _ObjectPlan:
    class_id: int
    kind: str
    size: tuple[float, float]
    color: np.ndarray
    positions: np.ndarray   # (N, 2) top-left of the un-smeared footprint
    smear: np.ndarray       # (N, 2) full smear vector per frame


def _plan_object(spec: VideoSpec, rng: np.random.Generator) -> _ObjectPlan:
    class_id = int(rng.integers(0, spec.num_classes))
    kind = CLASS_STYLES[class_id][0]
    size = (float(rng.integers(spec.min_size, spec.max_size + 1)),
            float(rng.integers(spec.min_size, spec.max_size + 1)))
    color = np.clip(np.asarray(CLASS_STYLES[class_id][2])
                    + rng.uniform(-0.08, 0.08, size=3), 0.05, 1.0)

    n = spec.num_frames
    times = np.arange(n, dtype=np.float64)
    for _ in range(200):
        if rng.random() < spec.static_fraction:
            vel = np.zeros(2)
        else:
            vel = rng.integers(-spec.max_speed, spec.max_speed + 1, size=2).astype(float)
            if not vel.any():
                vel[int(rng.integers(0, 2))] = float(rng.integers(1, spec.max_speed + 1)) \
                    * (1 if rng.random() < 0.5 else -1)
        accel = np.zeros(2)
        if spec.accel_range > 0:
            accel = rng.uniform(-spec.accel_range, spec.accel_range, size=2)
        disp = vel[None, :] * times[:, None] + 0.5 * accel[None, :] * times[:, None] ** 2

        # Forward-difference velocity, repeated on the last frame, so constant
        # motion gives every frame the same smear (and boxes that differ by
        # exactly the velocity).
        step = np.diff(disp, axis=0)
        step = np.vstack([step, step[-1:]]) if len(step) else np.zeros((n, 2))
        speed = np.linalg.norm(step, axis=1)
        smear = step * np.clip(speed / spec.blur_scale, 0.0, 1.0)[:, None]

        margin = 1.0
        expand = np.abs(smear) / 2.0
        lo = (expand + margin - disp).max(axis=0)
        hi = (np.asarray([spec.width, spec.height]) - size - expand - margin
              - disp).min(axis=0)
        if np.all(hi > lo):
            start = rng.uniform(lo, hi)
            positions = start[None, :] + disp
            return _ObjectPlan(class_id, kind, size, color, positions, smear)
    raise ValueError("motion spec cannot keep objects inside the frame")


def generate_video(spec: VideoSpec, rng: np.random.Generator,
                   with_masks: bool = False) -> VideoData:
    """Render one video with exact boxes, motion truth, and optional masks."""
    spec.validate()
    h, w, n = spec.height, spec.width, spec.num_frames
    cvx, cvy = spec.camera_velocity
    canvas = _smooth_noise(rng, h + abs(cvy) * (n - 1), w + abs(cvx) * (n - 1))
    canvas = 0.22 + 0.32 * canvas
    ox0 = max(0, -cvx * (n - 1))
    oy0 = max(0, -cvy * (n - 1))

    num_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    plans = [_plan_object(spec, rng) for _ in range(num_objects)]

    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    annotations: list[list[Annotation]] = []
    all_masks: list[list[np.ndarray]] | None = [] if with_masks else None
    boxes_per_object: list[list[BBox]] = [[] for _ in plans]

    for t in range(n):
        oy, ox = oy0 + cvy * t, ox0 + cvx * t
        frame = canvas[oy:oy + h, ox:ox + w].copy()
        frame_annos: list[Annotation] = []
        frame_masks: list[np.ndarray] = []
        for k, plan in enumerate(plans):
            pos = plan.positions[t]
            smear = plan.smear[t]
            expand = np.abs(smear) / 2.0
            box = BBox(pos[0] - expand[0], pos[1] - expand[1],
                       pos[0] + plan.size[0] + expand[0],
                       pos[1] + plan.size[1] + expand[1])
            boxes_per_object[k].append(box)
            frame_annos.append(Annotation(plan.class_id, box))

            r0 = max(0, int(np.floor(box.y1)))
            r1 = min(h, int(np.ceil(box.y2)) + 1)
            c0 = max(0, int(np.floor(box.x1)))
            c1 = min(w, int(np.ceil(box.x2)) + 1)
            window = (r0, r1, c0, c1)
            smear_len = float(np.linalg.norm(smear))
            samples = 1 if smear_len < 0.5 else max(2, int(np.ceil(2 * smear_len)))
            alpha = np.zeros((r1 - r0, c1 - c0))
            color = np.zeros((r1 - r0, c1 - c0, 3))
            for u in (np.linspace(0.0, 1.0, samples) if samples > 1 else [0.5]):
                sample_pos = pos + (u - 0.5) * smear
                mask = _shape_alpha(plan.kind, sample_pos, plan.size, window)
                alpha += mask
                color += mask[..., None] * _object_texture(
                    plan.class_id, plan.color, sample_pos, plan.size, window)
            covered = alpha > 0
            color[covered] /= alpha[covered, None]
            alpha /= samples
            patch = frame[r0:r1, c0:c1]
            frame[r0:r1, c0:c1] = patch * (1 - alpha[..., None]) + color * alpha[..., None]
            if with_masks:
                full = np.zeros((h, w), dtype=bool)
                full[r0:r1, c0:c1] = covered
                frame_masks.append(full)
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        frames[t] = np.clip(frame * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)
        annotations.append(frame_annos)
        if with_masks:
            all_masks.append(frame_masks)

    objects = [ObjectMotion(plan.class_id, plan.positions, boxes_per_object[k])
               for k, plan in enumerate(plans)]
    motion = MotionTruth(n, (h, w), (float(cvx), float(cvy)), objects)
    key_frames = [int((i + 0.5) * n / spec.key_frames) for i in range(spec.key_frames)]
    return VideoData(frames, annotations, motion, key_frames, all_masks)


# ---------------------------------------------------------------------------
# PPM I/O


def write_ppm(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 image")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"unsupported PPM header in {path}")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# On-disk dataset


def _video_dir(root: Path, index: int) -> Path:
    return root / f"video_{index:04d}"


def _annotations_payload(video: VideoData, labeled: list[int],
                         checksums: list[str]) -> dict:
    return {
        "frames": [
            {"boxes": [{"class": a.class_id, "x1": a.bbox.x1, "y1": a.bbox.y1,
                        "x2": a.bbox.x2, "y2": a.bbox.y2} for a in annos]}
            for annos in video.annotations
        ],
        "key_frames": video.key_frames,
        "labeled": labeled,
        "frame_checksums": checksums,
    }


def _motion_payload(motion: MotionTruth) -> dict:
    return {
        "camera_velocity": list(motion.camera_velocity),
        "objects": [
            {"class": obj.class_id,
             "positions": obj.positions.tolist(),
             "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in obj.boxes]}
            for obj in motion.objects
        ],
    }


def generate_dataset(spec: VideoSpec, num_videos: int, seed: int, out_dir,
                     threads: int = 1) -> "Dataset":
    """Generate and write a dataset; deterministic per (spec, seed)."""
    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(num_videos)

    def build(index: int) -> None:
        video_seed, label_seed = seeds[index].spawn(2)
        video = generate_video(spec, np.random.default_rng(video_seed))
        vdir = _video_dir(root, index)
        vdir.mkdir(exist_ok=True)
        checksums = []
        for t in range(spec.num_frames):
            write_ppm(vdir / f"frame_{t:04d}.ppm", video.frames[t])
            checksums.append(f"{zlib.crc32(video.frames[t].tobytes()):08x}")
        labeled = sorted(
            int(v) for v in np.random.default_rng(label_seed).choice(
                video.key_frames, size=1, replace=False))
        (vdir / "annotations.json").write_text(
            json.dumps(_annotations_payload(video, labeled, checksums)))
        (vdir / "motion.json").write_text(json.dumps(_motion_payload(video.motion)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(build, range(num_videos)))
    else:
        for index in range(num_videos):
            build(index)

    meta = {"videos": num_videos, "frames": spec.num_frames,
            "height": spec.height, "width": spec.width,
            "classes": spec.num_classes, "seed": seed,
            "spec": asdict(spec)}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return Dataset(root)


class Dataset:
    """Read access to a generated dataset, with light per-process caching."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no dataset at {self.root}")
        self.meta = json.loads(meta_path.read_text())
        self._frame_cache: dict[tuple[int, int], np.ndarray] = {}
        self._anno_cache: dict[int, dict] = {}
        self._motion_cache: dict[int, MotionTruth] = {}

    @property
    def num_videos(self) -> int:
        return int(self.meta["videos"])

    @property
    def num_frames(self) -> int:
        return int(self.meta["frames"])

    @property
    def num_classes(self) -> int:
        return int(self.meta["classes"])

    @property
    def frame_size(self) -> tuple[int, int]:
        return (int(self.meta["height"]), int(self.meta["width"]))

    def _annotations_raw(self, video: int) -> dict:
        if video not in self._anno_cache:
            path = _video_dir(self.root, video) / "annotations.json"
            self._anno_cache[video] = json.loads(path.read_text())
        return self._anno_cache[video]

    def load_frame(self, video: int, t: int) -> np.ndarray:
        """Frame as float64 in [0, 1]; integrity-checked on first load."""
        key = (video, t)
        if key not in self._frame_cache:
            path = _video_dir(self.root, video) / f"frame_{t:04d}.ppm"
            if not path.exists():
                raise FileNotFoundError(f"missing frame {path}")
            image = read_ppm(path)
            expected = self._annotations_raw(video)["frame_checksums"][t]
            actual = f"{zlib.crc32(image.tobytes()):08x}"
            if actual != expected:
                raise ValueError(f"checksum mismatch for {path}")
            self._frame_cache[key] = image
        return self._frame_cache[key].astype(np.float64) / 255.0

    def annotations(self, video: int, t: int) -> list[Annotation]:
        raw = self._annotations_raw(video)["frames"][t]["boxes"]
        return [Annotation(int(b["class"]),
                           BBox(b["x1"], b["y1"], b["x2"], b["y2"])) for b in raw]

    def key_frames(self, video: int) -> list[int]:
        return list(self._annotations_raw(video)["key_frames"])

    def default_labeled(self, video: int) -> list[int]:
        return list(self._annotations_raw(video)["labeled"])

    def motion(self, video: int) -> MotionTruth:
        if video not in self._motion_cache:
            path = _video_dir(self.root, video) / "motion.json"
            raw = json.loads(path.read_text())
            objects = [
                ObjectMotion(int(o["class"]), np.asarray(o["positions"]),
                             [BBox(*b) for b in o["boxes"]])
                for o in raw["objects"]
            ]
            self._motion_cache[video] = MotionTruth(
                self.num_frames, self.frame_size,
                tuple(raw["camera_velocity"]), objects)
        return self._motion_cache[video]


# ---------------------------------------------------------------------------
# Sparsity sampling and clip loading


@dataclass(frozen=True)
class SparsityAssignment:
    """Resolved labeled/unlabeled key-frame indices per participating video."""

    labeled: dict[int, list[int]]
    unlabeled: dict[int, list[int]]


def sample_sparsity(dataset: Dataset, plan: SparsityPlan) -> SparsityAssignment:
    """Deterministic labeled/unlabeled split of key frames per video."""
    first_keys = dataset.key_frames(0)
    plan.validate(len(first_keys))
    rng = np.random.default_rng(plan.seed)
    videos = list(range(dataset.num_videos))
    take = max(1, int(round(plan.video_fraction * len(videos))))
    chosen = sorted(int(v) for v in rng.choice(videos, size=take, replace=False))

    labeled: dict[int, list[int]] = {}
    unlabeled: dict[int, list[int]] = {}
    for video in chosen:
        keys = dataset.key_frames(video)
        picked = sorted(int(v) for v in rng.choice(
            keys, size=plan.labeled_per_video, replace=False))
        rest = [t for t in keys if t not in picked]
        if plan.unlabeled_per_video is not None and plan.unlabeled_per_video < len(rest):
            rest = sorted(int(v) for v in rng.choice(
                rest, size=plan.unlabeled_per_video, replace=False))
        labeled[video] = picked
        unlabeled[video] = rest
    return SparsityAssignment(labeled, unlabeled)


@dataclass
class VideoClip:
    """A key frame plus reference frames at the given offsets (key at 0)."""

    video: int
    key_t: int
    offsets: tuple[int, ...]
    frames: dict[int, np.ndarray]
    annotations: list[Annotation] | None
    motion: MotionTruth

    @property
    def key_frame(self) -> np.ndarray:
        return self.frames[0]


def valid_offsets(t: int, num_frames: int, ref_range: int) -> list[int]:
    return [j for j in range(-ref_range, ref_range + 1)
            if j != 0 and 0 <= t + j < num_frames]


def load_clip(dataset: Dataset, video: int, t: int, offsets,
              ref_range: int | None = None,
              rng: np.random.Generator | None = None,
              with_annotations: bool = True) -> VideoClip:
    """Load key frame ``t`` plus references at ``offsets``.

    Offsets falling outside the video are re-sampled uniformly from the valid
    offsets within ``ref_range`` (requires ``rng``), avoiding duplicates.
    """
    n = dataset.num_frames
    if not 0 <= t < n:
        raise ValueError(f"key index {t} out of range")
    resolved: list[int] = []
    for j in offsets:
        if 0 <= t + j < n:
            resolved.append(int(j))
            continue
        if ref_range is None or rng is None:
            raise ValueError(f"offset {j} invalid at t={t} and no re-sampling configured")
        pool = [v for v in valid_offsets(t, n, ref_range) if v not in resolved]
        if not pool:
            raise ValueError(f"no valid reference offsets at t={t}")
        resolved.append(int(pool[int(rng.integers(0, len(pool)))]))

    frames = {0: dataset.load_frame(video, t)}
    for j in resolved:
        frames[j] = dataset.load_frame(video, t + j)
    annos = dataset.annotations(video, t) if with_annotations else None
    return VideoClip(video=video, key_t=t, offsets=tuple(resolved),
                     frames=frames, annotations=annos,
                     motion=dataset.motion(video))
