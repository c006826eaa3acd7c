"""Report figures written next to the JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import Detections, GroundTruth, pr_curve  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def running_mean(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    window = max(1, min(window, len(v)))
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def plot_loss(losses: Sequence[float], path: str | Path, window: int = 100) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.3, alpha=0.4, color="tab:gray", label="step loss")
    rm = running_mean(losses, window)
    ax.plot(steps[len(steps) - len(rm):], rm, color="tab:blue", label=f"mean of {window}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def plot_pr(
    dets: Detections, gts: GroundTruth, class_names: Sequence[str], path: str | Path, iou_thr: float = 0.5
) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for k, name in enumerate(class_names):
        rec, prec = pr_curve(dets, gts, k, iou_thr)
        if rec.size:
            ax.step(rec, prec, where="post", label=name)
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"IoU {iou_thr:.2f}")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower left", fontsize=8)
    else:
        ax.text(0.5, 0.5, "no detections", ha="center", va="center")
    fig.tight_layout()
    return _save(fig, path)


def plot_panels(
    x: np.ndarray, y_hat: np.ndarray, diff: np.ndarray, path: str | Path, boxes: Sequence = ()
) -> Path:
    """Input, generated annotation and feature difference side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(x)
    axes[0].set_title("input")
    axes[1].imshow(y_hat)
    axes[1].set_title("annotation")
    im = axes[2].imshow(diff, cmap="magma")
    axes[2].set_title("feature diff")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    h, w = x.shape[:2]
    for b in boxes:
        for ax in axes[:2]:
            ax.add_patch(
                plt.Rectangle((b.x0 * w - 0.5, b.y0 * h - 0.5), b.w * w, b.h * h, fill=False, ec="lime", lw=0.8)
            )
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_ratio_sweep(rows: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """Grouped bars of AP50, AP75 and cross-class errors per shrink ratio."""
    labels = list(rows)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    xs = np.arange(len(labels))
    ax1.bar(xs - 0.2, [rows[k]["AP50"] for k in labels], 0.4, label="AP50")
    ax1.bar(xs + 0.2, [rows[k]["AP75"] for k in labels], 0.4, label="AP75")
    ax1.set_xticks(xs, labels)
    ax1.set_ylim(0, 1.05)
    ax1.set_xlabel("shrink ratio")
    ax1.legend(fontsize=8)
    ax2.bar(xs, [rows[k]["cross_class_errors"] for k in labels], 0.5, color="tab:red")
    ax2.set_xticks(xs, labels)
    ax2.set_xlabel("shrink ratio")
    ax2.set_ylabel("cross-class errors")
    fig.tight_layout()
    return _save(fig, path)
