"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codec import CodecError, style_variant, write_ppm, save_palette
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, generate_dataset, read_dataset
from .nn import CheckpointError, NonFiniteError, ShapeError

log = logging.getLogger("boxpaint")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _images_like(ds, gen_dir: Path) -> list[np.ndarray]:
    from .codec import read_ppm

    out = []
    for e in ds.entries:
        p = gen_dir / e.file
        if not p.exists():
            raise DatasetError(f"generated image for id {e.id} not found: {p}")
        img = read_ppm(p)
        if img.shape[:2] != (e.height, e.width):
            raise DatasetError(f"generated image {p} is {img.shape[1]}x{img.shape[0]}, expected {e.width}x{e.height}")
        out.append(img)
    return out


def _save_images(out: Path, ds, images) -> None:
    (out / "images").mkdir(parents=True, exist_ok=True)
    for e, img in zip(ds.entries, images):
        write_ppm(out / e.file, img)


def _ratio(text: str) -> float:
    try:
        v = float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad ratio {text!r}") from exc
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1], got {text}")
    return v


def _ratio_label(r: float) -> str:
    return str(Fraction(r).limit_denominator(16))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec = cfg.scene_spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    ds = generate_dataset(args.out, spec, args.count, start=args.start, overlap=args.overlap)
    from .pipeline import dataset_palette

    save_palette(dataset_palette(ds), Path(args.out) / "palette.json")
    print(f"wrote {len(ds)} images to {args.out}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    from .pipeline import dataset_palette, render_dataset

    ds = read_dataset(args.dataset)
    style = style_variant(args.variant, cfg.style()) if args.variant else cfg.style()
    out = Path(args.out)
    _save_images(out, ds, render_dataset(ds, style, dataset_palette(ds)))
    print(f"rendered {len(ds)} annotation images to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .denoiser import Trainer, build_unet
    from .diffusion import make_plan, make_schedule, save_run_schedule
    from .pipeline import dataset_palette, render_dataset
    from .plotting import plot_loss

    tcfg = cfg.train_config()
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, steps=args.steps)
    ds = read_dataset(args.dataset)
    targets = render_dataset(ds, cfg.style(), dataset_palette(ds))
    samples = [(ds.image(i), y) for i, y in enumerate(targets)]
    sched = make_schedule(cfg.diffusion.T)
    ckpt = Path(args.out)
    log_path = ckpt.with_suffix(".log.jsonl")
    if args.resume and ckpt.exists():
        trainer = Trainer.resume(ckpt, sched, tcfg)
        if log_path.exists():
            # drop records logged after the checkpoint was written
            kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] <= trainer.step]
            log_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        log_path.unlink(missing_ok=True)
        trainer = Trainer(build_unet(cfg.model, tcfg.seed), tcfg, sched)

    def progress(rec: dict) -> None:
        if rec["step"] % 500 == 0:
            log.info("step %d loss %.5f", rec["step"], rec["loss"])

    trainer.fit(samples, log_path=log_path, checkpoint=ckpt, on_step=progress)
    save_run_schedule(ckpt.with_suffix(".schedule.json"), sched, make_plan(cfg.diffusion.T, cfg.diffusion.S, cfg.diffusion.eta))
    losses = [json.loads(line)["loss"] for line in log_path.read_text().splitlines()]
    if losses:
        plot_loss(losses, ckpt.with_suffix(".loss.png"))
    print(f"trained {trainer.step} steps; checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    from .denoiser import TaskPrompt, load_model
    from .diffusion import make_plan, make_schedule
    from .pipeline import infer_dataset

    ds = read_dataset(args.dataset)
    model = load_model(args.ckpt)
    sched = make_schedule(cfg.diffusion.T)
    plan = make_plan(cfg.diffusion.T, args.steps or cfg.diffusion.S, cfg.diffusion.eta)
    prompt = TaskPrompt.ReconstructX if args.reconstruct else TaskPrompt.GenerateY
    seed = cfg.seed if args.seed is None else args.seed
    images = [ds.image(i) for i in range(len(ds))]
    gen = infer_dataset(model, images, plan, sched, seed=seed, prompt=prompt)
    _save_images(Path(args.out), ds, gen)
    print(f"generated {len(gen)} images to {args.out}")
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    from .pipeline import dataset_palette, detect_dataset
    from .postproc import save_results

    ds = read_dataset(args.dataset)
    pcfg = dataclasses.replace(cfg.postproc, nms=True) if args.nms else cfg.postproc
    gen = _images_like(ds, Path(args.gen))
    sets = detect_dataset(ds, gen, dataset_palette(ds), cfg.style(), pcfg)
    save_results(args.out, sets)
    if args.figures:
        _panels(ds, gen, sets, Path(args.figures), args.max_figures)
    print(f"wrote {sum(len(s.detections) for s in sets)} detections to {args.out}")
    return EXIT_OK


def _panels(ds, gen, sets, out: Path, limit: int) -> None:
    from .plotting import plot_panels
    from .postproc import FeatureExtractor, feature_diff

    out.mkdir(parents=True, exist_ok=True)
    fx = FeatureExtractor()
    for i in range(min(limit, len(ds))):
        x = ds.image(i)
        plot_panels(x, gen[i], feature_diff(x, gen[i], fx), out / f"panel_{ds.entries[i].id:06d}.png", sets[i].detections)


def _report(ev, args, label: str, class_names, sets, ds) -> None:
    """Print the evaluation and, with ``--out``, write JSON, CSV and figures."""
    from .metrics import MetricsReport
    from .plotting import plot_pr

    doc = ev.to_json()
    if getattr(args, "table", False):
        print(MetricsReport.table_header())
        print(ev.report.table_row(label))
    else:
        print(json.dumps(doc, indent=2))
    out = getattr(args, "out", None)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", doc)
        _write_csv(out / "metrics.csv", [{"run": label, **doc}])
        dets = {s.image_id: s.detections for s in sets}
        gts = {e.id: e.boxes for e in ds.entries}
        plot_pr(dets, gts, class_names, out / "pr_curve.png")


def cmd_eval(args, cfg: RunConfig) -> int:
    from .pipeline import evaluate
    from .postproc import load_results

    ds = read_dataset(args.dataset, check_images=False)
    try:
        sets = load_results(args.results)
    except FileNotFoundError as exc:
        raise DatasetError(f"results file {args.results} not found") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{args.results}: malformed results: {exc}") from exc
    ev = evaluate(ds, sets, cfg.eval.extra_ious)
    _report(ev, args, Path(args.results).stem, ds.classes, sets, ds)
    return EXIT_OK


def cmd_roundtrip(args, cfg: RunConfig) -> int:
    from .metrics import MetricsReport
    from .pipeline import roundtrip
    from .plotting import plot_ratio_sweep

    ds = read_dataset(args.dataset)
    base = style_variant(args.variant, cfg.style()) if args.variant else cfg.style()
    ratios = args.ratios or [base.shrink_ratio]
    rows: dict[str, dict] = {}
    results = {}
    for r in ratios:
        style = dataclasses.replace(base, shrink_ratio=r)
        ev, sets = roundtrip(ds, style, cfg.postproc, cfg.eval.extra_ious)
        rows[_ratio_label(r)] = ev.to_json()
        results[_ratio_label(r)] = (ev, sets)
    print(MetricsReport.table_header() + "   XCE " + " ".join(f"{k:>7}" for k in next(iter(rows.values())) if k.startswith("AP@")))
    for label, (ev, _) in results.items():
        extra = " ".join(f"{100 * v:7.1f}" for v in ev.extra_ap.values())
        print(ev.report.table_row(f"r={label}") + f" {ev.cross_class_errors:5d} " + extra)
    for label, (ev, _) in results.items():
        print(f"r={label}: AP50 = {ev.report.AP50:.3f}, cross-class errors = {ev.cross_class_errors}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "roundtrip.json", rows)
        _write_csv(out / "roundtrip.csv", [{"ratio": k, **v} for k, v in rows.items()])
        if len(rows) > 1:
            plot_ratio_sweep(rows, out / "ratio_sweep.png")
        from .plotting import plot_pr

        ev, sets = next(iter(results.values()))
        plot_pr({s.image_id: s.detections for s in sets}, {e.id: e.boxes for e in ds.entries}, ds.classes, out / "pr_curve.png")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boxpaint", description="Detection by painting boxes: data, training, inference and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run config JSON (defaults for every omitted key)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate a synthetic shapes dataset"))
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--count", type=int, required=True, help="number of images")
    sp.add_argument("--start", type=int, default=0, help="first scene index (for disjoint splits)")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.add_argument("--overlap", action="store_true", help="draw overlapping pairs of differently-classed shapes")
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("render", help="paint clean annotation images for a dataset"))
    sp.add_argument("--dataset", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--variant", choices=["a", "b", "c", "d"], help="a: white canvas, b: full boxes, c: shrunk, d: shrunk + dots")
    sp.set_defaults(func=cmd_render)

    sp = with_config(sub.add_parser("train", help="train the denoiser"))
    sp.add_argument("--dataset", required=True, help="training dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint path; log, schedule and loss plot are written beside it")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("infer", help="generate annotation images with a trained model"))
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--dataset", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="seed for the initial noise")
    sp.add_argument("--steps", type=int, help="override diffusion.S")
    sp.add_argument("--reconstruct", action="store_true", help="sample under the reconstruction prompt")
    sp.set_defaults(func=cmd_infer)

    sp = with_config(sub.add_parser("detect", help="decode generated images into detections"))
    sp.add_argument("--dataset", required=True, help="dataset directory")
    sp.add_argument("--gen", required=True, help="directory of generated annotation images")
    sp.add_argument("--out", required=True, help="results.json path")
    sp.add_argument("--nms", action="store_true", help="apply class-aware NMS")
    sp.add_argument("--figures", help="directory for input/annotation/diff panels")
    sp.add_argument("--max-figures", type=int, default=8, help="number of panels to draw")
    sp.set_defaults(func=cmd_detect)

    sp = with_config(sub.add_parser("eval", help="score detections against the dataset"))
    sp.add_argument("--dataset", required=True, help="dataset directory")
    sp.add_argument("--results", required=True, help="results.json from detect")
    sp.add_argument("--table", action="store_true", help="print a table row instead of JSON")
    sp.add_argument("--out", help="directory for metrics.json, metrics.csv and pr_curve.png")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("roundtrip", help="render, detect and evaluate without a model"))
    sp.add_argument("--dataset", required=True, help="dataset directory")
    sp.add_argument("--ratios", type=_ratio, nargs="+", help="shrink ratios to sweep, e.g. 1/2 1/3 1/4")
    sp.add_argument("--variant", choices=["a", "b", "c", "d"], help="annotation style variant")
    sp.add_argument("--out", help="directory for roundtrip.json, roundtrip.csv and figures")
    sp.set_defaults(func=cmd_roundtrip)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CodecError, CheckpointError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
