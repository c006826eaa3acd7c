"""Detection metrics: IoU, COCO-style AP and log-average miss rate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .codec import BBox

COCO_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# exact i/100 so recall ties such as 3/10 hit their point
RECALL_POINTS = np.arange(101) / 100
SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2
UNDEFINED = -1.0

# detections: image id -> boxes with scores; ground truth: image id -> boxes
Detections = Mapping[int, Sequence[BBox]]
GroundTruth = Mapping[int, Sequence[BBox]]


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchResult:
    """Per-detection outcome for one class at one IoU threshold, in ranking order."""

    scores: np.ndarray
    matched: np.ndarray
    ious: np.ndarray
    ignored: np.ndarray
    num_gt: int
    # (image id, index into that image's filtered gt list) per detection, or None
    gt_ref: list = None  # type: ignore[assignment]


def _ranked(dets: Detections, class_id: int | None) -> list[tuple[int, int, BBox]]:
    flat = [
        (img, k, b)
        for img in sorted(dets)
        for k, b in enumerate(dets[img])
        if class_id is None or b.class_id == class_id
    ]
    # stable: ties keep image-id then input order
    return sorted(flat, key=lambda item: -item[2].score)


def match(
    dets: Detections,
    gts: GroundTruth,
    iou_thr: float,
    class_id: int | None,
    area_range: tuple[float, float] | None = None,
    image_dims: Mapping[int, tuple[int, int]] | None = None,
) -> MatchResult:
    """Greedy score-ordered matching.

    Each detection takes the unmatched ground truth (same class unless
    ``class_id`` is None) with the highest IoU >= ``iou_thr``. With an
    ``area_range``, ground truths outside it are "ignore" boxes: a detection
    matching one, or an unmatched detection outside the range, is ignored.
    """
    gt_boxes: dict[int, list[BBox]] = {
        img: [g for g in boxes if class_id is None or g.class_id == class_id]
        for img, boxes in gts.items()
    }
    gt_ignore: dict[int, list[bool]] = {}
    for img, boxes in gt_boxes.items():
        if area_range is None:
            gt_ignore[img] = [False] * len(boxes)
        else:
            w, h = image_dims[img]  # type: ignore[index]
            gt_ignore[img] = [not area_range[0] <= g.area * w * h <= area_range[1] for g in boxes]
    taken = {img: [False] * len(boxes) for img, boxes in gt_boxes.items()}
    ranked = _ranked(dets, class_id)
    n = len(ranked)
    scores = np.zeros(n)
    matched = np.zeros(n, dtype=bool)
    ious = np.zeros(n)
    ignored = np.zeros(n, dtype=bool)
    gt_ref: list = [None] * n
    for k, (img, _, d) in enumerate(ranked):
        scores[k] = d.score
        cands = gt_boxes.get(img, [])
        flags = gt_ignore.get(img, [])
        best, best_iou = -1, iou_thr
        # non-ignored ground truths are tried first
        for j in sorted(range(len(cands)), key=lambda j: flags[j]):
            if taken[img][j]:
                continue
            if best >= 0 and not flags[best] and flags[j]:
                break
            v = iou(d, cands[j])
            if v < best_iou:
                continue
            best, best_iou = j, v
        if best >= 0:
            taken[img][best] = True
            matched[k] = True
            ious[k] = best_iou
            ignored[k] = flags[best]
            gt_ref[k] = (img, best)
        elif area_range is not None:
            w, h = image_dims[img]  # type: ignore[index]
            ignored[k] = not area_range[0] <= d.area * w * h <= area_range[1]
    num_gt = sum(not f for flags in gt_ignore.values() for f in flags)
    return MatchResult(scores, matched, ious, ignored, num_gt, gt_ref)


def ap_from_match(m: MatchResult) -> float:
    """101-point interpolated AP; ``UNDEFINED`` when there is no ground truth."""
    if m.num_gt == 0:
        return UNDEFINED
    keep = ~m.ignored
    tp = np.cumsum(m.matched[keep])
    fp = np.cumsum(~m.matched[keep])
    if tp.size == 0:
        return 0.0
    recall = tp / m.num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).tiny)
    # interpolated precision: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def _classes(gts: GroundTruth) -> list[int]:
    return sorted({g.class_id for boxes in gts.values() for g in boxes})


def average_precision(
    dets: Detections,
    gts: GroundTruth,
    iou_thr: float = 0.5,
    area_range: tuple[float, float] | None = None,
    image_dims: Mapping[int, tuple[int, int]] | None = None,
) -> float:
    """Mean over classes present in the ground truth of per-class AP."""
    aps = []
    for c in _classes(gts):
        ap = ap_from_match(match(dets, gts, iou_thr, c, area_range, image_dims))
        if ap != UNDEFINED:
            aps.append(ap)
    return float(np.mean(aps)) if aps else UNDEFINED


@dataclass
class MetricsReport:
    AP: float
    AP50: float
    AP75: float
    AP_s: float
    AP_m: float
    AP_l: float
    recall50: float
    mMR: float

    def to_json(self) -> dict:
        return asdict(self)

    def table_row(self, label: str = "") -> str:
        def fmt(v: float) -> str:
            return "  -  " if v == UNDEFINED else f"{100 * v:5.1f}"

        cols = [self.AP, self.AP50, self.AP75, self.AP_s, self.AP_m, self.AP_l, self.recall50, self.mMR]
        return f"{label:<12}" + " ".join(fmt(v) for v in cols)

    @staticmethod
    def table_header() -> str:
        names = ["AP", "AP50", "AP75", "APs", "APm", "APl", "R50", "mMR"]
        return f"{'':<12}" + " ".join(f"{n:>5}" for n in names)


def recall_at(dets: Detections, gts: GroundTruth, iou_thr: float = 0.5) -> float:
    total = sum(len(v) for v in gts.values())
    if total == 0:
        return UNDEFINED
    hit = sum(int(match(dets, gts, iou_thr, c).matched.sum()) for c in _classes(gts))
    return hit / total


def coco_metrics(
    dets: Detections, gts: GroundTruth, image_dims: Mapping[int, tuple[int, int]]
) -> MetricsReport:
    ap_by_iou = [average_precision(dets, gts, t) for t in COCO_IOUS]
    defined = [a for a in ap_by_iou if a != UNDEFINED]

    def bucket(lo: float, hi: float) -> float:
        vals = [average_precision(dets, gts, t, (lo, hi), image_dims) for t in COCO_IOUS]
        vals = [v for v in vals if v != UNDEFINED]
        return float(np.mean(vals)) if vals else UNDEFINED

    has_gt = any(len(v) for v in gts.values())
    return MetricsReport(
        AP=float(np.mean(defined)) if defined else UNDEFINED,
        AP50=ap_by_iou[0],
        AP75=ap_by_iou[5],
        AP_s=bucket(0.0, SMALL_AREA - 1e-9),
        AP_m=bucket(SMALL_AREA, LARGE_AREA),
        AP_l=bucket(LARGE_AREA + 1e-9, math.inf),
        recall50=recall_at(dets, gts, 0.5),
        mMR=log_avg_miss_rate(dets, gts) if has_gt else UNDEFINED,
    )


def miss_rate_curve(dets: Detections, gts: GroundTruth, iou_thr: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """``(fppi, miss_rate)`` at every distinct score threshold, class-agnostic.

    The first point is the empty detector (fppi 0, miss rate 1).
    """
    m = match(dets, gts, iou_thr, None)
    num_images = max(1, len(set(gts) | set(dets)))
    tp = np.cumsum(m.matched)
    fp = np.cumsum(~m.matched)
    # only the last detection of each score tie is a reachable operating point
    last = np.ones(len(m.scores), dtype=bool)
    last[:-1] = m.scores[1:] != m.scores[:-1]
    fppi = np.concatenate([[0.0], fp[last] / num_images])
    mr = np.concatenate([[1.0], 1.0 - tp[last] / m.num_gt])
    return fppi, mr


def log_avg_miss_rate(dets: Detections, gts: GroundTruth, iou_thr: float = 0.5) -> float:
    """Geometric mean of miss rate at 9 FPPI points log-spaced in [1e-2, 1]."""
    if sum(len(v) for v in gts.values()) == 0:
        raise ValueError("log-average miss rate needs at least one ground-truth box")
    fppi, mr = miss_rate_curve(dets, gts, iou_thr)
    refs = np.logspace(-2.0, 0.0, 9)
    sampled = []
    for ref in refs:
        # lowest threshold whose fppi does not exceed the reference point
        ok = np.flatnonzero(fppi <= ref)
        sampled.append(mr[ok[-1]])
    return float(np.exp(np.mean(np.log(np.maximum(sampled, 1e-10)))))


def pr_curve(dets: Detections, gts: GroundTruth, class_id: int, iou_thr: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(recall, precision)`` after each ranked detection of one class."""
    m = match(dets, gts, iou_thr, class_id)
    tp = np.cumsum(m.matched)
    fp = np.cumsum(~m.matched)
    if m.num_gt == 0 or tp.size == 0:
        return np.zeros(0), np.zeros(0)
    return tp / m.num_gt, tp / (tp + fp)


def cross_class_errors(dets: Detections, gts: GroundTruth, iou_thr: float = 0.5) -> int:
    """Detections that localize a ground truth (class-agnostic match) but carry the wrong class."""
    m = match(dets, gts, iou_thr, None)
    errors = 0
    for (img, _, d), ref in zip(_ranked(dets, None), m.gt_ref):
        if ref is not None and gts[ref[0]][ref[1]].class_id != d.class_id:
            errors += 1
    return errors
