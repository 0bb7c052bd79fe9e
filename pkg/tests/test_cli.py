import hashlib
import json
import time

import numpy as np
import pytest

from ssvod.cli import ExperimentConfig, main
from ssvod.detector import DetectorConfig, DetectorParams
from ssvod.synthdata import VideoSpec, generate_dataset


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


SPEC_PAYLOAD = {"num_frames": 9, "height": 32, "width": 32, "max_size": 12,
                "key_frames": 4}
DET_PAYLOAD = {"grid": 4, "patch": 8, "depth": 8, "num_classes": 5}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data") / "ds"
    generate_dataset(VideoSpec(**SPEC_PAYLOAD), 5, seed=31, out_dir=root)
    return root


def write_config(tmp_path, dataset_dir, out_name="run", **overrides):
    payload = {
        "dataset": str(dataset_dir),
        "out_dir": str(tmp_path / out_name),
        "mode": "ssvod",
        "seed": 0,
        "detector": DET_PAYLOAD,
        "train": {"iterations": 6, "ref_range": 3, "checkpoint_every": 0},
    }
    payload.update(overrides)
    path = tmp_path / f"{out_name}.json"
    path.write_text(json.dumps(payload))
    return path


class TestGenData:
    def test_generates_and_prints_summary(self, tmp_path, capsys):
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(json.dumps(SPEC_PAYLOAD))
        code = main(["gen-data", "--out", str(tmp_path / "d"), "--seed", "7",
                     "--videos", "2", "--spec", str(spec_file)])
        assert code == 0
        out = capsys.readouterr().out
        assert "2 videos" in out
        assert (tmp_path / "d" / "meta.json").exists()

    def test_same_seed_byte_identical(self, tmp_path):
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(json.dumps(SPEC_PAYLOAD))
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "5",
                         "--videos", "2", "--spec", str(spec_file)]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_refuses_nonempty_without_force(self, tmp_path, capsys):
        target = tmp_path / "d"
        target.mkdir()
        (target / "junk").write_text("x")
        code = main(["gen-data", "--out", str(target), "--videos", "1"])
        assert code == 1
        assert "force" in capsys.readouterr().err

    def test_invalid_spec_rejected(self, tmp_path, capsys):
        spec_file = tmp_path / "spec.json"
        spec_file.write_text(json.dumps({"bogus_knob": 3}))
        code = main(["gen-data", "--out", str(tmp_path / "d"), "--videos", "1",
                     "--spec", str(spec_file)])
        assert code == 1
        assert "bogus_knob" in capsys.readouterr().err


class TestTrainCommand:
    def test_smoke_run_completes_quickly(self, tmp_path, dataset_dir):
        config = write_config(tmp_path, dataset_dir)
        start = time.monotonic()
        assert main(["train", "--config", str(config)]) == 0
        assert time.monotonic() - start < 10.0
        run_dir = tmp_path / "run"
        for name in ("config.json", "history.csv", "student_final.svdp",
                     "teacher_final.svdp", "loss_curves.svg"):
            assert (run_dir / name).exists()
        svg = (run_dir / "loss_curves.svg").read_text()
        assert svg.startswith("<svg") and "unsup_soft" in svg

    def test_config_echo_round_trips(self, tmp_path, dataset_dir):
        config = write_config(tmp_path, dataset_dir, out_name="echo")
        assert main(["train", "--config", str(config)]) == 0
        echoed = json.loads((tmp_path / "echo" / "config.json").read_text())
        original = ExperimentConfig.from_json_dict(json.loads(config.read_text()))
        assert ExperimentConfig.from_json_dict(echoed) == original

    def test_unknown_key_rejected(self, tmp_path, dataset_dir, capsys):
        config = write_config(tmp_path, dataset_dir, out_name="bad",
                              typo_key={"a": 1})
        assert main(["train", "--config", str(config)]) == 1
        assert "typo_key" in capsys.readouterr().err

    def test_unknown_nested_key_rejected(self, tmp_path, dataset_dir, capsys):
        config = write_config(tmp_path, dataset_dir, out_name="bad2",
                              train={"iterations": 1, "lr_typo": 2.0})
        assert main(["train", "--config", str(config)]) == 1
        assert "lr_typo" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        config = write_config(tmp_path, tmp_path / "nowhere", out_name="bad3")
        assert main(["train", "--config", str(config)]) == 1


class TestEvalCommand:
    @pytest.fixture()
    def checkpoint(self, tmp_path):
        params = DetectorParams.init(DetectorConfig(**DET_PAYLOAD),
                                     np.random.default_rng(0))
        path = tmp_path / "ckpt.svdp"
        params.save(path)
        return path

    def test_untrained_checkpoint_near_zero_map(self, tmp_path, dataset_dir,
                                                checkpoint, capsys):
        out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(checkpoint), "--dataset",
                     str(dataset_dir), "--out", str(out), "--eval-range", "4"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["map50"] < 0.2
        for key in ("map50", "map75", "map_range", "size_breakdown",
                    "motion_breakdown", "confusion", "per_class_ap50"):
            assert key in report
        assert (out / "report.csv").exists()

    def test_eval_deterministic(self, tmp_path, dataset_dir, checkpoint):
        blobs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert main(["eval", "--checkpoint", str(checkpoint), "--dataset",
                         str(dataset_dir), "--out", str(out),
                         "--eval-range", "4"]) == 0
            blobs.append((out / "report.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_curves_emitted(self, tmp_path, dataset_dir, checkpoint):
        out = tmp_path / "curves_eval"
        assert main(["eval", "--checkpoint", str(checkpoint), "--dataset",
                     str(dataset_dir), "--out", str(out), "--eval-range", "4",
                     "--curves"]) == 0
        curve = out / "curves" / "pr_class_0.csv"
        assert curve.exists()
        assert curve.read_text().startswith("recall,precision")

    def test_bad_split(self, tmp_path, dataset_dir, checkpoint, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint), "--dataset",
                     str(dataset_dir), "--split", "bogus"]) == 1


class TestInspectPseudo:
    def test_zero_head_teacher_empty_fates(self, tmp_path, dataset_dir, capsys):
        params = DetectorParams.init(DetectorConfig(**DET_PAYLOAD),
                                     np.random.default_rng(1))
        checkpoint = tmp_path / "teacher.svdp"
        params.save(checkpoint)
        out = tmp_path / "inspect"
        code = main(["inspect-pseudo", "--checkpoint", str(checkpoint),
                     "--dataset", str(dataset_dir), "--out", str(out),
                     "--ref-range", "3"])
        assert code == 0
        summary = json.loads((out / "pseudo_summary.json").read_text())
        assert summary["survivors"] == 0
        assert summary["fate_counts"] == {}
        assert (out / "pseudo_records.jsonl").read_text() == ""

    def test_fate_counts_partition_survivors(self, tmp_path, dataset_dir):
        rng = np.random.default_rng(2)
        base = DetectorParams.init(DetectorConfig(**DET_PAYLOAD), rng)
        params = DetectorParams(
            config=base.config, embed_w=base.embed_w, embed_b=base.embed_b,
            head_w=rng.normal(0, 0.8, size=base.head_w.shape),
            head_b=rng.normal(0, 0.8, size=base.head_b.shape))
        checkpoint = tmp_path / "teacher.svdp"
        params.save(checkpoint)
        out = tmp_path / "inspect2"
        assert main(["inspect-pseudo", "--checkpoint", str(checkpoint),
                     "--dataset", str(dataset_dir), "--out", str(out),
                     "--ref-range", "3", "--tau-init", "0.05"]) == 0
        summary = json.loads((out / "pseudo_summary.json").read_text())
        assert sum(summary["fate_counts"].values()) == summary["survivors"]
        records = [json.loads(line) for line in
                   (out / "pseudo_records.jsonl").read_text().splitlines()]
        assert len(records) == summary["survivors"]
        assert all(r["fate"] in ("bbox", "cls", "bbox+cls", "soft", "discarded")
                   for r in records)


class TestReportCommand:
    def _run_dir(self, tmp_path, name, mode, seed, map50, dataset="ds"):
        run = tmp_path / name
        run.mkdir()
        payload = {"dataset": dataset, "out_dir": str(run), "mode": mode,
                   "seed": seed, "detector": DET_PAYLOAD,
                   "train": {"iterations": 6, "ref_range": 3}}
        cfg = ExperimentConfig.from_json_dict(payload)
        (run / "config.json").write_text(json.dumps(cfg.to_json_dict()))
        (run / "report.json").write_text(json.dumps({"map50": map50}))
        return run

    def test_groups_by_config_hash(self, tmp_path, capsys):
        runs = [self._run_dir(tmp_path, f"r{i}", "ssvod", i, 0.5 + 0.01 * i)
                for i in range(3)]
        out = tmp_path / "report"
        assert main(["report", *map(str, runs), "--out", str(out)]) == 0
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # header + one grouped row
        row = lines[1].split(",")
        assert row[1] == "ssvod" and row[2] == "3"
        assert float(row[4]) > 0  # sample std present

    def test_single_run_omits_std(self, tmp_path):
        run = self._run_dir(tmp_path, "solo", "ssvod", 0, 0.4)
        out = tmp_path / "report"
        assert main(["report", str(run), "--out", str(out)]) == 0
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        assert lines[1].split(",")[4] == ""

    def test_delta_column_against_supervised(self, tmp_path, capsys):
        sup = self._run_dir(tmp_path, "sup", "supervised", 0, 0.40)
        semi = self._run_dir(tmp_path, "semi", "ssvod", 0, 0.50)
        out = tmp_path / "report"
        assert main(["report", str(sup), str(semi), "--out", str(out)]) == 0
        lines = (out / "comparison.csv").read_text().strip().splitlines()
        semi_row = [l for l in lines[1:] if ",ssvod," in l][0]
        assert float(semi_row.split(",")[5]) == pytest.approx(0.10)
        assert (out / "comparison.svg").read_text().startswith("<svg")

    def test_skips_missing_and_errors_when_none(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", str(empty)]) == 1
        assert "no usable" in capsys.readouterr().err
