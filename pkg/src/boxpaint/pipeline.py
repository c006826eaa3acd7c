"""Dataset-level glue: render, infer, detect and evaluate over a whole Dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .codec import AnnotationStyle, BBox, Palette, box_pixels, make_palette, render_annotation, shrink_box
from .data import Dataset
from .denoiser import TaskPrompt, sample_latent
from .diffusion import DdimPlan, IdentityCodec, NoiseSchedule, ddim_step, grad_map
from .metrics import MetricsReport, average_precision, coco_metrics, cross_class_errors
from .postproc import DetectionSet, FeatureExtractor, PostprocConfig, detect


def dataset_palette(ds: Dataset) -> Palette:
    return make_palette(len(ds.classes), ds.classes)


def render_dataset(ds: Dataset, style: AnnotationStyle, palette: Palette) -> list[np.ndarray]:
    return [render_annotation(ds.image(i), e.boxes, style, palette) for i, e in enumerate(ds.entries)]


def _image_gen(seed: int, k: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + k)


@torch.no_grad()
def infer_dataset(
    model,
    images: Sequence[np.ndarray],
    plan: DdimPlan,
    sched: NoiseSchedule,
    seed: int = 0,
    batch: int = 8,
    prompt: TaskPrompt = TaskPrompt.GenerateY,
) -> list[np.ndarray]:
    """Sample one output per image; image ``k`` draws its noise from ``(seed, k)``.

    Deterministic plans (``eta == 0``) run in batches; outputs do not depend
    on the batch size.
    """
    codec = IdentityCodec()
    if hasattr(model, "eval"):
        model.eval()
    if plan.eta > 0:
        return [
            codec.decode(sample_latent(model, codec.encode(x)[None], plan, sched, prompt, _image_gen(seed, k))[0])
            for k, x in enumerate(images)
        ]
    out: list[np.ndarray] = []
    for start in range(0, len(images), batch):
        chunk = images[start : start + batch]
        z_x = torch.stack([codec.encode(x) for x in chunk])
        z = torch.stack([torch.randn(z_x.shape[1:], generator=_image_gen(seed, start + k)) for k in range(len(chunk))])
        for tau, tau_prev in plan.pairs():
            z = ddim_step(z, model(z, z_x, tau, prompt), tau, tau_prev, plan, sched)
        out.extend(codec.decode(zi) for zi in z)
    return out


def detect_dataset(
    ds: Dataset,
    generated: Sequence[np.ndarray],
    palette: Palette,
    style: AnnotationStyle,
    cfg: PostprocConfig,
    fx: FeatureExtractor | None = None,
) -> list[DetectionSet]:
    fx = fx or FeatureExtractor()
    return [
        detect(ds.image(i), y, fx, palette, style, cfg, image_id=e.id)
        for i, (e, y) in enumerate(zip(ds.entries, generated))
    ]


@dataclass
class Evaluation:
    report: MetricsReport
    cross_class_errors: int
    extra_ap: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {**self.report.to_json(), "cross_class_errors": self.cross_class_errors, **self.extra_ap}


def evaluate(ds: Dataset, sets: Iterable[DetectionSet], extra_ious: Sequence[float] = ()) -> Evaluation:
    dets = {s.image_id: s.detections for s in sets}
    gts = {e.id: e.boxes for e in ds.entries}
    for img in gts:
        dets.setdefault(img, [])
    dims = {e.id: (e.width, e.height) for e in ds.entries}
    extra = {f"AP@{t:g}": average_precision(dets, gts, t) for t in extra_ious}
    return Evaluation(coco_metrics(dets, gts, dims), cross_class_errors(dets, gts), extra)


def roundtrip(
    ds: Dataset,
    style: AnnotationStyle,
    cfg: PostprocConfig = PostprocConfig(),
    extra_ious: Sequence[float] = (0.9,),
    palette: Palette | None = None,
) -> tuple[Evaluation, list[DetectionSet]]:
    """Render clean annotations, decode them and score against the ground truth."""
    palette = palette or dataset_palette(ds)
    sets = detect_dataset(ds, render_dataset(ds, style, palette), palette, style, cfg)
    return evaluate(ds, sets, extra_ious), sets


def border_mask(boxes: Sequence[BBox], style: AnnotationStyle, h: int, w: int) -> np.ndarray:
    """Inner one-pixel ring of every painted (shrunk) rectangle."""
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        c0, r0, c1, r1 = box_pixels(shrink_box(b, style.shrink_ratio), w, h)
        mask[r0:r1, c0] = mask[r0:r1, c1 - 1] = True
        mask[r0, c0:c1] = mask[r1 - 1, c0:c1] = True
    return mask


def boundary_sharpness(ds: Dataset, generated: Sequence[np.ndarray], style: AnnotationStyle) -> float:
    """Mean gradient map of the generated images over the gt painted-box borders."""
    codec = IdentityCodec()
    total, count = 0.0, 0
    for e, y in zip(ds.entries, generated):
        mask = border_mask(e.boxes, style, *y.shape[:2])
        g = grad_map(codec.encode(y)).numpy()
        total += float(g[mask].sum())
        count += int(mask.sum())
    return total / count if count else 0.0
