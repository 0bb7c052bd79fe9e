import hashlib
import json

import numpy as np
import pytest

from ssvod.flow import analytic_flow
from ssvod.synthdata import (
    Dataset,
    SparsityPlan,
    VideoSpec,
    generate_dataset,
    generate_video,
    load_clip,
    read_ppm,
    sample_sparsity,
    valid_offsets,
    write_ppm,
)

FAST_SPEC = VideoSpec(num_frames=9, height=32, width=32, max_size=12,
                      key_frames=4, noise_sigma=0.0)


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenerateVideo:
    def test_static_scene_constant(self):
        spec = VideoSpec(num_frames=6, height=32, width=32, max_size=12,
                         key_frames=3, noise_sigma=0.0, static_fraction=1.0)
        video = generate_video(spec, np.random.default_rng(0))
        for t in range(1, 6):
            assert np.array_equal(video.frames[t], video.frames[0])
            for a, b in zip(video.annotations[t], video.annotations[0]):
                assert a.bbox == b.bbox and a.class_id == b.class_id

    def test_boxes_track_velocity_exactly(self):
        spec = VideoSpec(num_frames=8, height=48, width=48, max_size=12,
                         key_frames=4, noise_sigma=0.0, static_fraction=0.0)
        for seed in range(5):
            video = generate_video(spec, np.random.default_rng(seed))
            for obj in video.motion.objects:
                for t in range(7):
                    want_dx, want_dy = obj.displacement(t, 1)
                    got = np.subtract(obj.box(t + 1).as_tuple(), obj.box(t).as_tuple())
                    assert np.allclose(got, [want_dx, want_dy, want_dx, want_dy],
                                       atol=1e-9)

    def test_boxes_stay_inside_frame(self):
        spec = VideoSpec(num_frames=12, height=48, width=48, key_frames=6)
        for seed in range(5):
            video = generate_video(spec, np.random.default_rng(seed))
            for annos in video.annotations:
                for a in annos:
                    assert 0 <= a.bbox.x1 < a.bbox.x2 <= 48
                    assert 0 <= a.bbox.y1 < a.bbox.y2 <= 48

    def test_box_is_tight_around_rendered_mask(self):
        spec = VideoSpec(noise_sigma=0.0)
        for seed in range(3):
            video = generate_video(spec, np.random.default_rng(seed), with_masks=True)
            for t in range(spec.num_frames):
                for anno, mask in zip(video.annotations[t], video.masks[t]):
                    rows = np.flatnonzero(mask.any(axis=1))
                    cols = np.flatnonzero(mask.any(axis=0))
                    assert rows.size and cols.size
                    # tight mask bbox in continuous coordinates
                    tight = (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)
                    for got, want in zip(tight, anno.bbox.as_tuple()):
                        assert abs(got - want) <= 1.0

    def test_flow_self_consistency_on_masks(self):
        """Warping frame t's object pixels by the analytic flow lands exactly
        on frame t+j's object pixels (sigma = 0, integer velocities)."""
        spec = VideoSpec(noise_sigma=0.0)
        video = generate_video(spec, np.random.default_rng(7), with_masks=True)
        motion = video.motion
        for t, j in ((3, 2), (10, -3), (20, 5)):
            field = analytic_flow(motion, t, j)
            for k, obj in enumerate(motion.objects):
                dx, dy = obj.displacement(t, j)
                assert dx == int(dx) and dy == int(dy)
                mask_t = video.masks[t][k]
                mask_tj = video.masks[t + j][k]
                shifted = np.zeros_like(mask_t)
                h, w = mask_t.shape
                ys, xs = np.nonzero(mask_t)
                shifted[ys + int(dy), xs + int(dx)] = True
                assert np.array_equal(shifted, mask_tj)
                # the field inside the box carries exactly that displacement
                box = obj.box(t)
                rc = (int(box.y1) + 1, int(box.x1) + 1)
                assert field.data[rc][0] == dx and field.data[rc][1] == dy

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            VideoSpec(num_frames=2).validate()
        with pytest.raises(ValueError):
            VideoSpec(max_size=70).validate()


class TestDatasetOnDisk:
    def test_byte_determinism(self, tmp_path):
        generate_dataset(FAST_SPEC, 3, seed=42, out_dir=tmp_path / "a")
        generate_dataset(FAST_SPEC, 3, seed=42, out_dir=tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_threaded_generation_matches_serial(self, tmp_path):
        generate_dataset(FAST_SPEC, 4, seed=1, out_dir=tmp_path / "serial")
        generate_dataset(FAST_SPEC, 4, seed=1, out_dir=tmp_path / "pool", threads=4)
        assert tree_digest(tmp_path / "serial") == tree_digest(tmp_path / "pool")

    def test_meta_and_reload(self, tmp_path):
        dataset = generate_dataset(FAST_SPEC, 2, seed=3, out_dir=tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        assert meta["videos"] == 2 and meta["frames"] == 9
        assert meta["spec"]["noise_sigma"] == 0.0
        again = Dataset(tmp_path / "d")
        frame = again.load_frame(0, 0)
        assert frame.shape == (32, 32, 3)
        assert frame.min() >= 0.0 and frame.max() <= 1.0
        annos = again.annotations(0, 0)
        assert all(a.class_id < FAST_SPEC.num_classes for a in annos)
        motion = again.motion(0)
        assert motion.num_frames == 9
        assert len(motion.objects) == len(annos)

    def test_checksum_mismatch_detected(self, tmp_path):
        dataset = generate_dataset(FAST_SPEC, 1, seed=4, out_dir=tmp_path / "d")
        frame_path = tmp_path / "d" / "video_0000" / "frame_0000.ppm"
        blob = bytearray(frame_path.read_bytes())
        blob[-1] ^= 0xFF
        frame_path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            dataset.load_frame(0, 0)

    def test_missing_frame(self, tmp_path):
        dataset = generate_dataset(FAST_SPEC, 1, seed=5, out_dir=tmp_path / "d")
        (tmp_path / "d" / "video_0000" / "frame_0003.ppm").unlink()
        with pytest.raises(FileNotFoundError):
            dataset.load_frame(0, 3)


class TestPPM:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        image = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, image)
        assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
        assert np.array_equal(read_ppm(path), image)

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
        with pytest.raises(ValueError):
            read_ppm(path)


class TestSparsity:
    @pytest.fixture()
    def dataset(self, tmp_path):
        return generate_dataset(VideoSpec(), 4, seed=9, out_dir=tmp_path / "d")

    def test_default_key_frame_layout(self, dataset):
        keys = dataset.key_frames(0)
        assert len(keys) == 15
        assert keys == sorted(keys)
        assert all(0 <= t < 31 for t in keys)

    def test_single_mode_counts(self, dataset):
        plan = SparsityPlan(labeled_per_video=1, seed=0)
        assignment = sample_sparsity(dataset, plan)
        for video in assignment.labeled:
            assert len(assignment.labeled[video]) == 1
            assert len(assignment.unlabeled[video]) == 14
            assert not set(assignment.labeled[video]) & set(assignment.unlabeled[video])

    def test_dense_mode_no_unlabeled(self, dataset):
        plan = SparsityPlan(labeled_per_video=15, seed=0)
        assignment = sample_sparsity(dataset, plan)
        for video in assignment.unlabeled:
            assert assignment.unlabeled[video] == []

    def test_unlabeled_cap(self, dataset):
        plan = SparsityPlan(labeled_per_video=1, unlabeled_per_video=5, seed=0)
        assignment = sample_sparsity(dataset, plan)
        for video in assignment.unlabeled:
            assert len(assignment.unlabeled[video]) == 5

    def test_seed_determinism(self, dataset):
        a = sample_sparsity(dataset, SparsityPlan(seed=11))
        b = sample_sparsity(dataset, SparsityPlan(seed=11))
        assert a == b

    def test_video_fraction(self, dataset):
        plan = SparsityPlan(video_fraction=0.5, seed=0)
        assignment = sample_sparsity(dataset, plan)
        assert len(assignment.labeled) == 2

    def test_invalid_plan(self, dataset):
        with pytest.raises(ValueError):
            sample_sparsity(dataset, SparsityPlan(labeled_per_video=16))


class TestLoadClip:
    @pytest.fixture()
    def dataset(self, tmp_path):
        return generate_dataset(FAST_SPEC, 2, seed=10, out_dir=tmp_path / "d")

    def test_mid_video_offsets(self, dataset):
        clip = load_clip(dataset, 0, 4, offsets=(-1, 1))
        assert set(clip.frames) == {-1, 0, 1}
        assert clip.key_frame.shape == (32, 32, 3)
        assert clip.annotations is not None

    def test_boundary_offset_resampled(self, dataset):
        rng = np.random.default_rng(0)
        clip = load_clip(dataset, 0, 0, offsets=(-5, 1), ref_range=5, rng=rng)
        assert all(0 <= 0 + j < 9 for j in clip.offsets)
        assert len(clip.offsets) == 2
        assert len(set(clip.offsets)) == 2

    def test_boundary_without_rng_raises(self, dataset):
        with pytest.raises(ValueError):
            load_clip(dataset, 0, 0, offsets=(-5,))

    def test_eval_offsets_cover_range(self):
        offs = valid_offsets(15, 31, 15)
        assert len(offs) == 30
        assert 0 not in offs
        assert valid_offsets(0, 31, 15) == list(range(1, 16))
