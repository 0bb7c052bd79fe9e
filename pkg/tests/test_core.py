import math

import numpy as np
import pytest

from ssvod.core import (
    BBox,
    ClassDist,
    Detection,
    PredictionSet,
    clip_box,
    iou,
    kl_divergence,
    nms,
)


def pixel_grid_iou(a: BBox, b: BBox, extent: int = 64) -> float:
    """Exhaustive pixel-counting IoU oracle for integer-coordinate boxes.

    A box [x1,y1,x2,y2] with integer corners covers exactly the unit pixels
    (i, j) with x1 <= i < x2 and y1 <= j < y2.
    """
    grid_a = np.zeros((extent, extent), dtype=bool)
    grid_b = np.zeros((extent, extent), dtype=bool)
    grid_a[int(a.y1):int(a.y2), int(a.x1):int(a.x2)] = True
    grid_b[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = True
    inter = int(np.sum(grid_a & grid_b))
    union = int(np.sum(grid_a | grid_b))
    if inter == 0:
        return 0.0
    return inter / union


def random_int_box(rng, extent: int = 64, max_side: int = 32) -> BBox:
    x1 = int(rng.integers(0, extent - 1))
    y1 = int(rng.integers(0, extent - 1))
    w = int(rng.integers(1, min(max_side, extent - x1) + 1))
    h = int(rng.integers(1, min(max_side, extent - y1) + 1))
    return BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


class TestBBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            BBox(10, 0, 10, 5)
        with pytest.raises(ValueError):
            BBox(0, 8, 5, 3)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            BBox(0, 0, math.inf, 10)

    def test_geometry_helpers(self):
        b = BBox(2, 4, 10, 10)
        assert b.width == 8
        assert b.height == 6
        assert b.area() == 48
        assert b.center() == (6, 7)


class TestIoU:
    def test_identical_boxes(self):
        a = BBox(0, 0, 10, 10)
        assert iou(a, a) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)) == 0.0

    def test_quarter_overlap(self):
        # 5x5 intersection over 100 + 100 - 25 union, checked against the
        # pixel-counting oracle as well.
        a = BBox(0, 0, 10, 10)
        b = BBox(5, 5, 15, 15)
        assert iou(a, b) == pytest.approx(25 / 175, abs=1e-12)
        assert iou(a, b) == pixel_grid_iou(a, b)

    def test_symmetry_and_bounds_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            a = random_int_box(rng)
            b = random_int_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0
        assert iou(a, a) == 1.0

    def test_matches_pixel_oracle_exactly(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            a = random_int_box(rng)
            b = random_int_box(rng)
            assert iou(a, b) == pixel_grid_iou(a, b)


class TestKLDivergence:
    def test_identical_distributions(self):
        p = ClassDist(np.array([0.5, 0.5]))
        assert abs(kl_divergence(p, p)) <= 1e-9

    def test_one_hot_vs_uniform(self):
        p = ClassDist(np.array([1.0, 0.0]))
        q = ClassDist(np.array([0.5, 0.5]))
        assert kl_divergence(p, q) == pytest.approx(math.log(2), abs=1e-6)

    def test_swapped_peaks(self):
        p = ClassDist(np.array([0.9, 0.1]))
        q = ClassDist(np.array([0.1, 0.9]))
        expected = 0.9 * math.log(9) + 0.1 * math.log(1 / 9)
        assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-6)

    def test_length_mismatch_raises(self):
        p = ClassDist(np.array([1.0]))
        q = ClassDist(np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            kl_divergence(p, q)

    def test_nonnegative_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            raw_p = rng.random(5)
            raw_q = rng.random(5)
            p = ClassDist(raw_p / raw_p.sum())
            q = ClassDist(raw_q / raw_q.sum())
            assert kl_divergence(p, q) >= -1e-6
            assert abs(kl_divergence(p, p)) <= 1e-9


def det(x1, y1, x2, y2, conf, probs=(0.6, 0.4)):
    return Detection.make(BBox(x1, y1, x2, y2), np.array(probs), conf)


class TestNMS:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_suppresses_overlapping(self):
        a = det(0, 0, 10, 10, 0.9)
        b = det(0, 0.5, 10, 10.5, 0.8)  # iou ~0.905 with a
        assert iou(a.bbox, b.bbox) > 0.5
        kept = nms([b, a], 0.5)
        assert kept == [a]

    def test_disjoint_boxes_survive_in_order(self):
        a = det(0, 0, 10, 10, 0.9)
        b = det(30, 30, 40, 40, 0.8)
        assert nms([a, b], 0.5) == [a, b]

    def test_tie_broken_by_earlier_index(self):
        a = det(0, 0, 10, 10, 0.7)
        b = det(1, 0, 11, 10, 0.7)
        kept = nms([a, b], 0.5)
        assert kept == [a]

    def test_idempotent_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            dets = [
                det(
                    x1 := float(rng.integers(0, 40)),
                    y1 := float(rng.integers(0, 40)),
                    x1 + float(rng.integers(4, 20)),
                    y1 + float(rng.integers(4, 20)),
                    float(rng.random()),
                )
                for _ in range(12)
            ]
            once = nms(dets, 0.4)
            assert nms(once, 0.4) == once

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            nms([], 0.0)


class TestClipBox:
    def test_clamps_at_origin(self):
        assert clip_box(BBox(-5, -5, 10, 10), 64, 64) == BBox(0, 0, 10, 10)

    def test_interior_unchanged(self):
        b = BBox(10, 10, 20, 20)
        assert clip_box(b, 64, 64) == b

    def test_fully_outside_rejected(self):
        assert clip_box(BBox(70, 70, 90, 90), 64, 64) is None

    def test_invalid_frame_size(self):
        with pytest.raises(ValueError):
            clip_box(BBox(0, 0, 5, 5), 0, 64)


class TestTypes:
    def test_class_dist_validation(self):
        with pytest.raises(ValueError):
            ClassDist(np.array([0.5, 0.6]))
        with pytest.raises(ValueError):
            ClassDist(np.array([-0.1, 1.1]))

    def test_class_dist_immutable(self):
        d = ClassDist(np.array([0.25, 0.75]))
        with pytest.raises(ValueError):
            d.probs[0] = 0.9

    def test_detection_hard_class_must_match(self):
        with pytest.raises(ValueError):
            Detection(BBox(0, 0, 5, 5), ClassDist(np.array([0.9, 0.1])), 0.5, 1)

    def test_detection_confidence_range(self):
        with pytest.raises(ValueError):
            det(0, 0, 5, 5, 1.5)

    def test_prediction_set_sorting(self):
        dets = [det(0, 0, 5, 5, 0.3), det(10, 10, 15, 15, 0.9)]
        pset = PredictionSet.make(dets, offset=None)
        assert [d.confidence for d in pset.detections] == [0.9, 0.3]
        assert pset.is_raw
        with pytest.raises(ValueError):
            PredictionSet(detections=tuple(dets), offset=1)
