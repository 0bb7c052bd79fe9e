"""Experiment harness: data generation, training, evaluation, pseudo-label
inspection, and run comparison.

Subcommands: ``gen-data``, ``train``, ``eval``, ``inspect-pseudo``,
``report``. Config files are JSON with strict unknown-key rejection so a typo
cannot silently run a different experiment. Exit codes: 0 success, 1 user
error, 2 internal invariant violation or training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .detector import DetectorConfig, DetectorParams, TrainingDiverged
from .evaluate import evaluate_detections, evaluate_model, pr_curve, run_detector
from .pseudo import (
    ConsistencyScores,
    PseudoLabelSet,
    SelectionThresholds,
    confidence_only_select,
    gen_prediction_sets,
    match_objects,
    pseudo_label_map,
    pseudo_quality,
    score_consistency,
    select,
)
from .synthdata import (
    Dataset,
    SparsityPlan,
    VideoSpec,
    generate_dataset,
    load_clip,
    sample_sparsity,
)
from .trainer import AugmentRecord, TrainConfig, teacher_cell_flows, train

DEFAULT_VIDEOS = 60


def _threads_default() -> int:
    value = os.environ.get("SSVOD_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def _strict_dataclass(cls, payload: dict, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"unknown keys in {context}: {sorted(unknown)}")
    return payload


@dataclasses.dataclass
class ExperimentConfig:
    """Fully resolved experiment description, echoed to disk before any work."""

    dataset: str
    out_dir: str
    mode: str = "ssvod"
    seed: int = 0
    detector: DetectorConfig = dataclasses.field(default_factory=DetectorConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sparsity: SparsityPlan = dataclasses.field(default_factory=SparsityPlan)
    eval_range: int = 15
    eval_model: str = "student"

    TOP_KEYS = {"dataset", "out_dir", "mode", "seed", "detector", "train",
                "thresholds", "sparsity", "eval_range", "eval_model"}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExperimentConfig":
        unknown = set(payload) - cls.TOP_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "out_dir"):
            if key not in payload:
                raise ValueError(f"config is missing required key {key!r}")
        mode = payload.get("mode", "ssvod")
        if mode not in ("ssvod", "supervised"):
            raise ValueError(f"unknown mode {mode!r}")
        seed = int(payload.get("seed", 0))

        det = DetectorConfig(**_strict_dataclass(
            DetectorConfig, payload.get("detector", {}), "detector"))
        thr = SelectionThresholds(**_strict_dataclass(
            SelectionThresholds, payload.get("thresholds", {}), "thresholds"))
        train_payload = dict(_strict_dataclass(
            TrainConfig, payload.get("train", {}), "train"))
        train_payload.pop("thresholds", None)
        train_payload.setdefault("seed", seed)
        train_cfg = TrainConfig(thresholds=thr, **train_payload)
        sparsity_payload = dict(_strict_dataclass(
            SparsityPlan, payload.get("sparsity", {}), "sparsity"))
        sparsity_payload.setdefault("seed", seed)
        plan = SparsityPlan(**sparsity_payload)
        eval_model = payload.get("eval_model", "student")
        if eval_model not in ("student", "teacher"):
            raise ValueError(f"unknown eval_model {eval_model!r}")
        return cls(dataset=str(payload["dataset"]), out_dir=str(payload["out_dir"]),
                   mode=mode, seed=seed, detector=det, train=train_cfg,
                   sparsity=plan, eval_range=int(payload.get("eval_range", 15)),
                   eval_model=eval_model)

    def to_json_dict(self) -> dict:
        train_dict = dataclasses.asdict(self.train)
        thresholds = train_dict.pop("thresholds")
        return {
            "dataset": self.dataset,
            "out_dir": self.out_dir,
            "mode": self.mode,
            "seed": self.seed,
            "detector": dataclasses.asdict(self.detector),
            "train": train_dict,
            "thresholds": thresholds,
            "sparsity": dataclasses.asdict(self.sparsity),
            "eval_range": self.eval_range,
            "eval_model": self.eval_model,
        }

    def config_hash(self) -> str:
        """Group key for report aggregation: everything except seeds and paths."""
        payload = self.to_json_dict()
        payload.pop("out_dir")
        payload.pop("seed")
        payload["train"].pop("seed", None)
        payload["sparsity"].pop("seed", None)
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# SVG helpers (hand-rolled polyline/bar charts, no timestamps)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def polyline_chart(series: dict[str, list[float]], title: str,
                   width: int = 640, height: int = 360) -> str:
    """Multi-series line chart over the sample index."""
    margin = 50
    lines = _svg_header(width, height)
    lines.append(f'<text x="{width // 2}" y="20" text-anchor="middle" '
                 f'font-size="14">{title}</text>')
    values = [v for vs in series.values() for v in vs]
    if values:
        vmax = max(max(values), 1e-9)
        n = max(len(vs) for vs in series.values())
        span_x = width - 2 * margin
        span_y = height - 2 * margin
        for idx, (name, vs) in enumerate(series.items()):
            color = _PALETTE[idx % len(_PALETTE)]
            points = []
            for i, v in enumerate(vs):
                x = margin + span_x * (i / max(n - 1, 1))
                y = height - margin - span_y * (v / vmax)
                points.append(f"{x:.1f},{y:.1f}")
            lines.append(f'<polyline fill="none" stroke="{color}" '
                         f'stroke-width="1.5" points="{" ".join(points)}"/>')
            lines.append(f'<text x="{width - margin + 4}" '
                         f'y="{margin + 16 * idx}" font-size="11" '
                         f'fill="{color}">{name}</text>')
        lines.append(f'<text x="{margin}" y="{height - margin + 16}" '
                     f'font-size="11">0</text>')
        lines.append(f'<text x="{width - margin}" y="{height - margin + 16}" '
                     f'text-anchor="end" font-size="11">{n - 1}</text>')
        lines.append(f'<text x="{margin - 6}" y="{margin}" text-anchor="end" '
                     f'font-size="11">{vmax:.3f}</text>')
    lines.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    lines.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def bar_chart(labels: list[str], values: list[float], errors: list[float | None],
              title: str, width: int = 640, height: int = 360) -> str:
    margin = 50
    lines = _svg_header(width, height)
    lines.append(f'<text x="{width // 2}" y="20" text-anchor="middle" '
                 f'font-size="14">{title}</text>')
    if values:
        vmax = max(max(v + (e or 0.0) for v, e in zip(values, errors)), 1e-9)
        span_x = width - 2 * margin
        span_y = height - 2 * margin
        slot = span_x / len(values)
        for i, (label, value) in enumerate(zip(labels, values)):
            x = margin + i * slot + slot * 0.15
            bar_w = slot * 0.7
            bar_h = span_y * value / vmax
            y = height - margin - bar_h
            color = _PALETTE[i % len(_PALETTE)]
            lines.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                         f'height="{bar_h:.1f}" fill="{color}"/>')
            err = errors[i]
            if err:
                cx = x + bar_w / 2
                y0 = height - margin - span_y * (value + err) / vmax
                y1 = height - margin - span_y * max(value - err, 0.0) / vmax
                lines.append(f'<line x1="{cx:.1f}" y1="{y0:.1f}" x2="{cx:.1f}" '
                             f'y2="{y1:.1f}" stroke="black"/>')
            lines.append(f'<text x="{x + bar_w / 2:.1f}" y="{height - margin + 14}" '
                         f'text-anchor="middle" font-size="10">{label}</text>')
            lines.append(f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" '
                         f'text-anchor="middle" font-size="10">{value:.3f}</text>')
    lines.append(f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} is not empty (use --force to overwrite)",
              file=sys.stderr)
        return 1
    spec_payload = {}
    if args.spec:
        spec_payload = json.loads(Path(args.spec).read_text())
        _strict_dataclass(VideoSpec, spec_payload, "video spec")
        if "camera_velocity" in spec_payload:
            spec_payload["camera_velocity"] = tuple(spec_payload["camera_velocity"])
    spec = VideoSpec(**spec_payload)
    spec.validate()
    dataset = generate_dataset(spec, args.videos, args.seed, out,
                               threads=args.threads)
    print(f"generated {dataset.num_videos} videos x {dataset.num_frames} frames "
          f"({spec.height}x{spec.width}, {spec.num_classes} classes) at {out}")
    return 0


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Train per the config; returns the run directory."""
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_json_dict(), indent=1, sort_keys=True))
    dataset = Dataset(cfg.dataset)
    assignment = sample_sparsity(dataset, cfg.sparsity)
    try:
        result = train(dataset, cfg.detector, cfg.train, cfg.mode, assignment,
                       out_dir=run_dir)
    except TrainingDiverged:
        print("training diverged; last-good state is in the run directory",
              file=sys.stderr)
        raise
    series = {name: [getattr(h, name) for h in result.history]
              for name in ("sup_cls", "sup_bbox", "unsup_cls", "unsup_bbox",
                           "unsup_soft")}
    stride = max(1, len(result.history) // 400)
    series = {k: v[::stride] for k, v in series.items()}
    (run_dir / "loss_curves.svg").write_text(
        polyline_chart(series, f"loss terms ({cfg.mode})"))
    return run_dir


def cmd_train(args) -> int:
    payload = json.loads(Path(args.config).read_text())
    cfg = ExperimentConfig.from_json_dict(payload)
    if not Path(cfg.dataset, "meta.json").exists():
        print(f"error: no dataset at {cfg.dataset}", file=sys.stderr)
        return 1
    run_dir = run_experiment(cfg)
    print(f"run complete: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    params = DetectorParams.load(args.checkpoint)
    dataset = Dataset(args.dataset)
    if args.split not in ("keyframes", "all"):
        print(f"error: unknown split {args.split!r}", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    if args.split == "keyframes":
        report = evaluate_model(params, dataset, eval_range=args.eval_range,
                                threads=args.threads)
    else:
        dets, gts, cats = run_detector(params, dataset, eval_range=args.eval_range,
                                       key_frames_only=False, threads=args.threads)
        report = evaluate_detections(dets, gts, cats, dataset.num_classes,
                                     dataset.num_videos * dataset.num_frames)
    report.save(out / "report.json", out / "report.csv")
    if args.curves:
        curve_dir = out / "curves"
        curve_dir.mkdir(exist_ok=True)
        dets, gts, _ = run_detector(params, dataset, eval_range=args.eval_range,
                                    key_frames_only=args.split == "keyframes",
                                    threads=args.threads)
        for class_id in range(dataset.num_classes):
            points = pr_curve(dets, gts, 0.5, class_id)
            with open(curve_dir / f"pr_class_{class_id}.csv", "w") as fh:
                fh.write("recall,precision\n")
                for r, p in points:
                    fh.write(f"{r!r},{p!r}\n")
    print(f"mAP@0.5 {report.map50:.4f}  mAP@0.75 {report.map75:.4f}  "
          f"mAP@0.5:0.95 {report.map_range:.4f}")
    return 0


def cmd_inspect_pseudo(args) -> int:
    params = DetectorParams.load(args.checkpoint)
    dataset = Dataset(args.dataset)
    thresholds = SelectionThresholds(
        tau_init=args.tau_init, gamma_c=args.gamma_c,
        zeta_iou=args.zeta_iou, eta_div=args.eta_div)
    cfg = TrainConfig(thresholds=thresholds, flow_source=args.flow,
                      flow_noise_sigma=args.flow_sigma, seed=args.seed,
                      ref_range=args.ref_range)
    rng = np.random.default_rng(args.seed)

    records = []
    fate_counts: dict[str, int] = {}
    pseudo_sets, gt_sets = [], []
    baseline_labels, survivors = [], 0
    for video in range(dataset.num_videos):
        labeled = set(dataset.default_labeled(video))
        for t in dataset.key_frames(video):
            if t in labeled:
                continue
            candidates = [j for j in range(-cfg.ref_range, cfg.ref_range + 1) if j != 0]
            picks = rng.choice(len(candidates), size=cfg.refs_per_set, replace=False)
            clip = load_clip(dataset, video, t, [candidates[int(i)] for i in picks],
                             ref_range=cfg.ref_range, rng=rng, with_annotations=False)
            flows = teacher_cell_flows(clip, AugmentRecord(), cfg,
                                       params.config.grid, rng)
            raw, warped = gen_prediction_sets(params, clip, flows,
                                              thresholds.tau_init)
            if len(raw):
                matches = [match_objects(raw, fw) for fw in warped]
                scores = score_consistency(raw, warped, matches)
                pseudo = select(raw, scores, thresholds)
                for det, score, fate in zip(raw.detections, scores.per_object,
                                            pseudo.fates):
                    records.append({
                        "frame": [video, t],
                        "bbox": list(det.bbox.as_tuple()),
                        "confidence": det.confidence,
                        "xiou": score.xiou,
                        "xdiv": score.xdiv,
                        "fate": fate,
                    })
                    fate_counts[fate] = fate_counts.get(fate, 0) + 1
                survivors += len(raw)
            else:
                pseudo = PseudoLabelSet((), (), (), (), ConsistencyScores(()), ())
            pseudo_sets.append(pseudo)
            gt_sets.append(dataset.annotations(video, t))
            baseline_labels.append(confidence_only_select(raw, thresholds.gamma_c))

    quality = pseudo_quality(pseudo_sets, gt_sets, dataset.num_classes)
    baseline_map = pseudo_label_map(baseline_labels, gt_sets, dataset.num_classes)
    summary = {
        "fate_counts": fate_counts,
        "survivors": survivors,
        "quality": quality,
        "confidence_only_pseudo_map": baseline_map,
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pseudo_records.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    (out / "pseudo_summary.json").write_text(json.dumps(summary, indent=1,
                                                        sort_keys=True))
    print(f"survivors {survivors}  fates {fate_counts}")
    print(f"three-stage pseudo mAP {quality['pseudo_map']:.4f}  "
          f"confidence-only pseudo mAP {baseline_map:.4f}")
    return 0


def cmd_report(args) -> int:
    groups: dict[str, dict] = {}
    for run in args.runs:
        run_dir = Path(run)
        config_path = run_dir / "config.json"
        report_path = run_dir / "report.json"
        if not config_path.exists() or not report_path.exists():
            print(f"warning: skipping {run_dir} (missing config.json or "
                  f"report.json)", file=sys.stderr)
            continue
        cfg = ExperimentConfig.from_json_dict(json.loads(config_path.read_text()))
        report = json.loads(report_path.read_text())
        key = cfg.config_hash()
        group = groups.setdefault(key, {"mode": cfg.mode, "maps": [], "runs": []})
        if group["mode"] != cfg.mode:
            print(f"warning: config hash collision across modes at {run_dir}",
                  file=sys.stderr)
        group["maps"].append(float(report["map50"]))
        group["runs"].append(str(run_dir))
    if not groups:
        print("error: no usable run directories", file=sys.stderr)
        return 1

    supervised_means = [float(np.mean(g["maps"])) for g in groups.values()
                        if g["mode"] == "supervised"]
    baseline = supervised_means[0] if supervised_means else None

    rows = []
    for key, group in sorted(groups.items(), key=lambda kv: kv[1]["mode"]):
        maps = group["maps"]
        mean = float(np.mean(maps))
        std = float(np.std(maps, ddof=1)) if len(maps) > 1 else None
        delta = None if baseline is None or group["mode"] == "supervised" \
            else mean - baseline
        rows.append({"config": key, "mode": group["mode"], "runs": len(maps),
                     "map50_mean": mean, "map50_std": std, "delta_vs_supervised": delta})

    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w") as fh:
        fh.write("config,mode,runs,map50_mean,map50_std,delta_vs_supervised\n")
        for row in rows:
            std = "" if row["map50_std"] is None else repr(row["map50_std"])
            delta = "" if row["delta_vs_supervised"] is None \
                else repr(row["delta_vs_supervised"])
            fh.write(f'{row["config"]},{row["mode"]},{row["runs"]},'
                     f'{row["map50_mean"]!r},{std},{delta}\n')
    labels = [f'{r["mode"]}:{r["config"][:6]}' for r in rows]
    (out / "comparison.svg").write_text(bar_chart(
        labels, [r["map50_mean"] for r in rows],
        [r["map50_std"] for r in rows], "final mAP@0.5 by config"))
    for row in rows:
        std = "" if row["map50_std"] is None else f' +- {row["map50_std"]:.4f}'
        delta = "" if row["delta_vs_supervised"] is None \
            else f'  (delta {row["delta_vs_supervised"]:+.4f})'
        print(f'{row["mode"]:<11} {row["config"]} runs={row["runs"]} '
              f'mAP@0.5 {row["map50_mean"]:.4f}{std}{delta}')
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssvod",
        description="Semi-supervised video object detection laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=DEFAULT_VIDEOS)
    p.add_argument("--spec", help="JSON file with video-spec overrides")
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=_threads_default())
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="keyframes")
    p.add_argument("--eval-range", type=int, default=15)
    p.add_argument("--out")
    p.add_argument("--curves", action="store_true")
    p.add_argument("--threads", type=int, default=_threads_default())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-pseudo",
                       help="dump per-detection pseudo-label fates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flow", default="analytic", choices=("analytic", "block"))
    p.add_argument("--flow-sigma", type=float, default=0.5)
    p.add_argument("--ref-range", type=int, default=9)
    p.add_argument("--tau-init", type=float, default=0.5)
    p.add_argument("--gamma-c", type=float, default=0.8)
    p.add_argument("--zeta-iou", type=float, default=0.9)
    p.add_argument("--eta-div", type=float, default=0.005)
    p.set_defaults(func=cmd_inspect_pseudo)

    p = sub.add_parser("report", help="aggregate evaluated runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
