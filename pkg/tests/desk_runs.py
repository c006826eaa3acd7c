"""Cached desk-scale training runs for the end-to-end acceptance checks.

Each run is driven through the command line (gen-data, train, infer, detect,
eval) in a directory keyed by a hash of its config. Training resumes from the
last checkpoint, so an interrupted run continues where it stopped. Run this
file directly to pre-build the cache in the background:

    python tests/desk_runs.py
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("BOXPAINT_CACHE", ROOT / ".cache" / "desk_runs"))

TRAIN_IMAGES = 2000
HELD_OUT = 50
HELD_OUT_START = 100_000  # scene indices disjoint from the training split
STEPS = 20_000


def desk_config(lambda2: float) -> dict:
    return {
        "seed": 0,
        "data": {"num_classes": 5, "shrunk_gap": 3},
        "train": {"lr": 2e-4, "steps": STEPS, "lambda2": lambda2, "checkpoint_every": 1000, "log_every": 1},
        "diffusion": {"S": 50, "eta": 0.0},
    }


def run_dir(cfg: dict) -> Path:
    key = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
    return CACHE / key


def cli(*args: str) -> None:
    env = {**os.environ, "OMP_NUM_THREADS": "1"}
    subprocess.run([sys.executable, "-m", "boxpaint.cli", *args], check=True, env=env)


def ensure_trained(cfg: dict) -> Path:
    d = run_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    conf = d / "config.json"
    conf.write_text(json.dumps(cfg, indent=1, sort_keys=True))
    if not (d / "train" / "index.json").exists():
        cli("gen-data", "--config", str(conf), "--out", str(d / "train"), "--count", str(TRAIN_IMAGES))
    if not (d / "held" / "index.json").exists():
        cli("gen-data", "--config", str(conf), "--out", str(d / "held"), "--count", str(HELD_OUT), "--start", str(HELD_OUT_START))
    if not (d / "trained.ok").exists():
        cli("-v", "train", "--config", str(conf), "--dataset", str(d / "train"), "--out", str(d / "model.gdck"), "--resume")
        (d / "trained.ok").write_text("done\n")
    return d


def ensure_evaluated(cfg: dict) -> dict:
    """Train if needed, then score held-out generation and reconstruction (cached)."""
    from boxpaint.codec import AnnotationStyle, read_ppm
    from boxpaint.data import read_dataset
    from boxpaint.denoiser import psnr
    from boxpaint.pipeline import boundary_sharpness

    d = ensure_trained(cfg)
    summary = d / "summary.json"
    if summary.exists():
        return json.loads(summary.read_text())
    conf, held = str(d / "config.json"), str(d / "held")
    cli("infer", "--config", conf, "--ckpt", str(d / "model.gdck"), "--dataset", held, "--out", str(d / "gen_y"))
    cli("infer", "--config", conf, "--ckpt", str(d / "model.gdck"), "--dataset", held, "--out", str(d / "gen_x"), "--reconstruct")
    cli("detect", "--config", conf, "--dataset", held, "--gen", str(d / "gen_y"), "--out", str(d / "results.json"),
        "--figures", str(d / "figures"))
    cli("eval", "--config", conf, "--dataset", held, "--results", str(d / "results.json"), "--out", str(d / "eval"))

    ds = read_dataset(held)
    xs = [ds.image(i) for i in range(len(ds))]
    gen_y = [read_ppm(d / "gen_y" / e.file) for e in ds.entries]
    gen_x = [read_ppm(d / "gen_x" / e.file) for e in ds.entries]
    losses = [json.loads(line)["loss"] for line in (d / "model.log.jsonl").read_text().splitlines()]
    metrics = json.loads((d / "eval" / "metrics.json").read_text())
    out = {
        "steps": len(losses),
        "loss_first_1k": float(np.mean(losses[:1000])),
        "loss_last_1k": float(np.mean(losses[-1000:])),
        "AP50": metrics["AP50"],
        "AP": metrics["AP"],
        "psnr_x": float(np.mean([psnr(a, b) for a, b in zip(gen_x, xs)])),
        "sharpness": boundary_sharpness(ds, gen_y, AnnotationStyle()),
    }
    summary.write_text(json.dumps(out, indent=1))
    return out


if __name__ == "__main__":
    for lam in (0.1, 0.0):
        print(lam, ensure_evaluated(desk_config(lam)), flush=True)
