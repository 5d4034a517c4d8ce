"""Command-line entry point: every experiment stage as a subcommand.

All state lives on disk (datasets, checkpoints, NDJSON training records),
so each analysis is a replayable pipeline of subcommands. The dataset root
defaults to $DGDETECT_DATA_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation
from .data import AnnotatedImage, DatasetError, load_image, load_manifest, save_image
from .model import load_checkpoint
from .synth import SynthConfig, generate_synthetic_dataset
from .train import ConfigurationError, TrainConfig, TrainRecord, TrainingError, fit
from .wqt import WaterParams, build_distance_matrix, synthesize_domains


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)
    summary: str = ""


def _data_root() -> Path:
    return Path(os.environ.get("DGDETECT_DATA_ROOT", "."))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgdetect", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-domain dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-val", type=int, default=10)
    p.add_argument("--image-size", type=int, default=160)
    p.add_argument("--domains", type=int, default=7, help="training domains (one more is held out)")
    p.add_argument("--spurious", type=float, default=0.8)

    p = sub.add_parser("augment", help="restyle a dataset into new domains")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None, help="manifest path")
    p.add_argument("--styles", type=Path, required=True,
                   help="directory of style exemplar images, or JSON list of water params")
    p.add_argument("--splits", type=str, default="train,val")

    p = sub.add_parser("style-matrix", help="pairwise style distances between exemplars")
    _add_common(p)
    p.add_argument("--images", type=Path, required=True, help="directory of exemplar images")

    p = sub.add_parser("train", help="train one method arm")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--method", type=str, default=None)
    p.add_argument("--config", type=Path, default=None, help="TrainConfig JSON")

    p = sub.add_parser("eval", help="evaluate checkpoints over validation splits")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, action="append", required=True)
    p.add_argument("--split", type=str, default=None, help="comma-separated; default all val*")
    p.add_argument("--pr-curves", action="store_true", help="emit PR curve plots")

    p = sub.add_parser("correlate", help="style-distance vs performance correlation")
    _add_common(p)
    p.add_argument("--fixtures", type=str, default="paper",
                   help="'paper' for the shipped reference tables, or a directory "
                        "with reference_perf.csv and reference_style_distance.csv")

    p = sub.add_parser("smoothgrad", help="saliency map for the best detection in an image")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--min-conf", type=float, default=0.0)

    p = sub.add_parser("report", help="summarize training records into tables and plots")
    _add_common(p)
    p.add_argument("--records", type=Path, action="append", required=True,
                   help="record.ndjson file or a directory to scan (repeatable)")
    return parser


def _cmd_synth(args) -> CommandResult:
    out = args.out or _data_root() / "aquashapes"
    cfg = SynthConfig(
        n_train=args.n_train, n_val=args.n_val, image_size=args.image_size,
        k_domains=args.domains, spurious_correlation=args.spurious,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = generate_synthetic_dataset(cfg, out)
    n = sum(len(v) for v in manifest.splits.values())
    return CommandResult(
        0, [out / "manifest.json"],
        f"generated {n} images over {len(manifest.splits)} splits "
        f"({len(manifest.domains)} domains) in {out}",
    )


def _load_styles(path: Path) -> list:
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not files:
            raise DatasetError(f"no style images found in {path}")
        return [AnnotatedImage(pixels=load_image(p), source_id=p.stem) for p in files]
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return [
        WaterParams(
            attenuation=tuple(e["attenuation"]),
            veiling_light=tuple(e["veiling_light"]),
            transmission=e["transmission"],
        )
        for e in raw
    ]


def _cmd_augment(args) -> CommandResult:
    data = args.data or _data_root() / "manifest.json"
    manifest = load_manifest(data)
    styles = _load_styles(args.styles)
    splits = [s for s in args.splits.split(",") if s]
    merged = synthesize_domains(manifest, styles, splits=splits, out_dir=args.out)
    new = [n for n in merged.splits if n not in manifest.splits]
    return CommandResult(
        0, [merged.root / "manifest.json"],
        f"emitted {len(new)} restyled splits: {', '.join(sorted(new))}",
    )


def _cmd_style_matrix(args) -> CommandResult:
    files = sorted(
        p for p in args.images.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if len(files) < 2:
        raise DatasetError(f"need at least 2 exemplar images in {args.images}")
    images = [load_image(p) for p in files]
    matrix = build_distance_matrix(images, [p.stem for p in files])
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "style_distance.csv"
    matrix.to_csv(csv_path)
    return CommandResult(0, [csv_path], f"{len(files)}x{len(files)} style-distance matrix -> {csv_path}")


def _cmd_train(args) -> CommandResult:
    data = args.data or _data_root() / "aquashapes" / "manifest.json"
    manifest = load_manifest(data)
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.method is not None:
        cfg = replace(cfg, method=args.method)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or Path("runs") / f"{cfg.method}_seed{cfg.seed}"
    result = fit(manifest, cfg, out_dir=out)
    best = result.record.best
    return CommandResult(
        0,
        [out / "final.pt", out / "best_ori.pt", out / "best_heldout.pt", out / "record.ndjson"],
        f"{cfg.method} seed {cfg.seed}: best ori mAP {best['ori']['map']*100:.2f} "
        f"(epoch {best['ori']['epoch']}), best held-out mAP "
        f"{best['held_out']['map']*100:.2f} (epoch {best['held_out']['epoch']}) -> {out}",
    )


def _cmd_eval(args) -> CommandResult:
    data = args.data or _data_root() / "aquashapes" / "manifest.json"
    manifest = load_manifest(data)
    splits = (
        [s for s in args.split.split(",") if s]
        if args.split
        else sorted(n for n in manifest.splits if n.startswith("val"))
    )
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    rows, values = [], []
    artifacts: list[Path] = []
    for ckpt in args.checkpoint:
        model, payload = load_checkpoint(ckpt)
        label = payload.get("extra", {}).get("method") or Path(ckpt).stem
        per_split = []
        for split in splits:
            result = evaluation.evaluate(model, manifest, split)
            per_split.append(result.map * 100.0)
            if args.pr_curves:
                artifacts.append(
                    _plot_pr_curves(result, manifest.classes, out / f"pr_{label}_{split}.png")
                )
        rows.append(label)
        values.append(per_split)
    matrix = evaluation.PerfMatrix(rows=tuple(rows), cols=tuple(splits), values=np.array(values))
    csv_path = matrix.to_csv(out / "perf_matrix.csv")
    text = matrix.render_text()
    (out / "perf_matrix.txt").write_text(text + "\n", encoding="utf-8")
    return CommandResult(0, [csv_path, out / "perf_matrix.txt", *artifacts], text)


def _plot_pr_curves(result, class_names, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for cid, ap in sorted(result.per_class.items()):
        recall, precision = evaluation.pr_curve(result.detections, result.ground_truths, cid)
        name = class_names[cid] if cid < len(class_names) else str(cid)
        ax.plot(recall, precision, label=f"{name} (AP {ap*100:.1f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _cmd_correlate(args) -> CommandResult:
    if args.fixtures == "paper":
        h_dist = evaluation.load_reference_style_distance()
        h_perf = evaluation.reference_h_perf()
    else:
        root = Path(args.fixtures)
        perf = evaluation.PerfMatrix.from_csv(root / "reference_perf.csv")
        with open(root / "reference_style_distance.csv", "r", encoding="utf-8") as fh:
            names = tuple(fh.readline().strip().split(",")[1:])
            d = np.array(
                [[float(v) for v in line.strip().split(",")[1:]] for line in fh if line.strip()]
            )
        from .wqt import StyleDistanceMatrix

        h_dist = StyleDistanceMatrix(names=names, d=d)
        cols = tuple(f"val_{n}" for n in names)
        rows = tuple(f"ori+{n}" for n in names)
        sub = evaluation.PerfMatrix(
            rows=rows, cols=cols,
            values=perf.values[
                np.ix_([perf.rows.index(r) for r in rows], [perf.cols.index(c) for c in cols])
            ],
        )
        h_perf = evaluation.perf_delta_matrix(sub, {c: perf.row("baseline")[c] for c in cols})
    lines = []
    for conv in evaluation.CORRELATION_CONVENTIONS:
        value = evaluation.style_perf_correlation(h_dist, h_perf, conv)
        lines.append(f"negated Pearson correlation ({conv} entries): {value:.4f}")
    lines.append("reference convention: all entries (reproduces the published 0.4634)")
    return CommandResult(0, [], "\n".join(lines))


def _cmd_smoothgrad(args) -> CommandResult:
    model, _ = load_checkpoint(args.checkpoint)
    pixels = load_image(args.image)
    pred = model.predict(pixels)
    dets = evaluation.nms(evaluation.decode(pred, args.min_conf), 0.5)
    if not dets:
        return CommandResult(1, [], f"no detections above confidence {args.min_conf} in {args.image}")
    target = dets[0]
    sal = evaluation.smoothgrad(
        model, pixels, target, n=args.n, noise_sigma=args.sigma,
        seed=args.seed if args.seed is not None else 0,
    )
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    gray = out / f"saliency_{stem}.png"
    overlay = out / f"saliency_{stem}_overlay.png"
    save_image(gray, np.repeat(sal.values[:, :, None], 3, axis=2))
    mixed = 0.4 * pixels + 0.6 * np.stack(
        [sal.values, np.zeros_like(sal.values), np.zeros_like(sal.values)], axis=2
    )
    save_image(overlay, np.clip(mixed, 0.0, 1.0))
    return CommandResult(
        0, [gray, overlay],
        f"saliency for class {target.class_id} at confidence {target.confidence:.3f} -> {gray}",
    )


def _collect_records(paths: list[Path]) -> list[TrainRecord]:
    records = []
    for p in paths:
        if p.is_dir():
            records.extend(TrainRecord.from_ndjson(f) for f in sorted(p.rglob("record.ndjson")))
        else:
            records.append(TrainRecord.from_ndjson(p))
    if not records:
        raise DatasetError("no training records found")
    return records


def _cmd_report(args) -> CommandResult:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = _collect_records(args.records)
    out = args.out or Path("report")
    out.mkdir(parents=True, exist_ok=True)

    splits = sorted({e["split"] for r in records for e in r.evals})
    rows, final_vals, best_vals = [], [], []
    for r in records:
        label = f"{r.method}(seed{r.seed})"
        rows.append(label)
        last_epoch = max((e["epoch"] for e in r.evals), default=0)
        final_vals.append(
            [
                next((e["map"] * 100 for e in r.evals if e["split"] == s and e["epoch"] == last_epoch), 0.0)
                for s in splits
            ]
        )
        best_vals.append(
            [max((e["map"] * 100 for e in r.evals if e["split"] == s), default=0.0) for s in splits]
        )
    artifacts = []
    for name, vals in (("final", final_vals), ("best", best_vals)):
        matrix = evaluation.PerfMatrix(rows=tuple(rows), cols=tuple(splits), values=np.array(vals))
        artifacts.append(matrix.to_csv(out / f"perf_{name}.csv"))
        (out / f"perf_{name}.txt").write_text(matrix.render_text() + "\n", encoding="utf-8")
        artifacts.append(out / f"perf_{name}.txt")

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for r in records:
        label = f"{r.method}(seed{r.seed})"
        held = r.best.get("held_out", {}).get("split")
        if held:
            pts = [(e["epoch"], e["map"] * 100) for e in r.evals if e["split"] == held]
            if pts:
                axes[0].plot(*zip(*pts), marker="o", label=label)
        steps = [s["step"] for s in r.steps]
        axes[1].plot(steps, [s["total"] for s in r.steps], label=label, lw=0.8)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("held-out mAP (%)")
    axes[0].legend(fontsize=7)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("total loss")
    axes[1].set_yscale("log")
    fig.tight_layout()
    curves = out / "curves.png"
    fig.savefig(curves, dpi=120)
    plt.close(fig)
    artifacts.append(curves)

    best_txt = (out / "perf_best.txt").read_text(encoding="utf-8")
    return CommandResult(0, artifacts, f"report for {len(records)} runs -> {out}\n{best_txt}")


_COMMANDS = {
    "synth": _cmd_synth,
    "augment": _cmd_augment,
    "style-matrix": _cmd_style_matrix,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "correlate": _cmd_correlate,
    "smoothgrad": _cmd_smoothgrad,
    "report": _cmd_report,
}


def run(argv: list[str]) -> CommandResult:
    """Execute one subcommand; never raises for expected failure modes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(int(exc.code or 0), [], "")
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, ConfigurationError, TrainingError, ValueError, OSError) as exc:
        return CommandResult(1, [], f"error: {exc}")


def main() -> None:
    result = run(sys.argv[1:])
    if result.summary:
        stream = sys.stdout if result.exit_code == 0 else sys.stderr
        print(result.summary, file=stream)
    sys.exit(result.exit_code)


if __name__ == "__main__":
    main()
