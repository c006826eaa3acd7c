"""Decode generated annotation images into scored, classed boxes.

The pipeline compares deep features of the input and the generated image,
keeps pixels whose feature difference stands out, groups them with DBSCAN,
and reads each group's class off the painted palette colors.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from .codec import RED, AnnotationStyle, BBox, Palette, decode_extent, unshrink_box
from .metrics import iou
from .nn import conv2d

# --------------------------------------------------------------------------
# features


@dataclass
class FeatureExtractor:
    """Frozen random conv pyramid; stage strides 1, 2, 4 with 8, 16, 32 channels."""

    seed: int = 0
    channels: tuple[int, ...] = (8, 16, 32)
    weights: list[tuple[torch.Tensor, torch.Tensor, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        g = torch.Generator().manual_seed(self.seed)
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(self.channels):
            std = (2.0 / (in_ch * 9)) ** 0.5
            w = torch.randn(out_ch, in_ch, 3, 3, generator=g) * std
            b = torch.zeros(out_ch)
            layers.append((w, b, 1 if i == 0 else 2))
            in_ch = out_ch
        self.weights = layers

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> list[torch.Tensor]:
        x = torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)[None] / 127.5 - 1
        feats = []
        for w, b, stride in self.weights:
            x = F.relu(conv2d(x, w, b, stride=stride, pad=1))
            feats.append(x[0])
        return feats


def feature_diff(x: np.ndarray, y_hat: np.ndarray, fx: Callable[[np.ndarray], list[torch.Tensor]]) -> np.ndarray:
    """Per-stage channelwise L2 feature distance, nearest-upsampled and summed."""
    if x.shape != y_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y_hat.shape}")
    h, w = x.shape[:2]
    total = torch.zeros(h, w)
    for fa, fb in zip(fx(x), fx(y_hat)):
        d = torch.linalg.vector_norm(fa - fb, dim=0)
        total += F.interpolate(d[None, None], size=(h, w), mode="nearest")[0, 0]
    return total.numpy().astype(np.float64)


def binarize(d: np.ndarray, k_sigma: float = 2.0) -> np.ndarray:
    """Row-major ``(N, 2)`` array of ``(row, col)`` where ``d > mean + k*std``."""
    thr = d.mean() + k_sigma * d.std()
    return np.argwhere(d > thr)


# --------------------------------------------------------------------------
# clustering


@dataclass
class Cluster:
    members: np.ndarray  # (N, 2) rows, cols
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 inclusive

    @property
    def mass(self) -> int:
        return len(self.members)


NOISE = -1


def dbscan_labels(points: np.ndarray, eps: float = 3.0, min_pts: int = 8) -> np.ndarray:
    """Cluster label per point (``NOISE`` for noise), scanning in the given order.

    A point is core when at least ``min_pts`` points (itself included) lie
    within distance ``eps``. Clusters grow breadth-first from the first
    unlabeled core in scan order; a border point joins the first cluster to
    reach it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got {eps}, {min_pts}")
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(np.asarray(points, dtype=np.float64))
    neighbors = [np.sort(np.asarray(nb, dtype=np.int64)) for nb in tree.query_ball_point(points, eps)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    current = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = current
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = current
                    if core[q]:
                        queue.append(q)
        current += 1
    return labels


def dbscan(points: np.ndarray, eps: float = 3.0, min_pts: int = 8) -> list[Cluster]:
    """DBSCAN over pixel coordinates; points are scanned in row-major order."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    labels = dbscan_labels(pts, eps, min_pts)
    clusters = []
    for k in range(labels.max() + 1 if len(labels) else 0):
        m = pts[labels == k]
        r0, c0 = m.min(axis=0)
        r1, c1 = m.max(axis=0)
        clusters.append(Cluster(m, (int(r0), int(c0), int(r1), int(c1))))
    return clusters


# --------------------------------------------------------------------------
# classification and box recovery


@dataclass(frozen=True)
class PostprocConfig:
    eps: float = 3.0
    min_pts: int = 8
    k_sigma: float = 2.0
    color_thresh: float = 80.0
    red_guard: float = 100.0
    min_score: float = 0.3
    min_area: int = 9
    grow_margin: int = 8
    nms: bool = False
    nms_iou: float = 0.5
    verify_center: bool = False


@dataclass(frozen=True)
class Classification:
    class_id: int
    score: float
    # painted extent as a half-open pixel rectangle (col0, row0, col1, row1)
    extent: tuple[int, int, int, int]


def assign_colors(pixels: np.ndarray, palette: Palette, cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Palette index per pixel, ``-1`` when unassigned and ``-2`` for red-dot pixels."""
    px = pixels.reshape(-1, 3).astype(np.float64)
    red = np.linalg.norm(px - np.array(RED, dtype=np.float64), axis=1) < cfg.red_guard
    d = np.linalg.norm(px[:, None, :] - palette.as_array()[None], axis=2)
    nearest = d.argmin(axis=1)
    out = np.where(d[np.arange(len(px)), nearest] < cfg.color_thresh, nearest, -1)
    out[red] = -2
    return out.reshape(pixels.shape[:-1])


def _classify_mask(
    region: np.ndarray, mask: np.ndarray, origin: tuple[int, int], n_classes: int, cfg: PostprocConfig
) -> Classification | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    sub = region[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    if sub.size < cfg.min_area:
        return None
    votes = np.bincount(sub[sub >= 0], minlength=n_classes)
    winner = int(np.argmax(votes))  # ties go to the lower class id
    voters = int((sub != -2).sum())
    score = float(votes[winner]) / max(voters, 1)
    if score < cfg.min_score:
        return None
    r, c = origin
    extent = (c + int(cols[0]), r + int(rows[0]), c + int(cols[-1]) + 1, r + int(rows[-1]) + 1)
    return Classification(winner, score, extent)


def painted_regions(
    c: Cluster, y_hat: np.ndarray, palette: Palette, cfg: PostprocConfig = PostprocConfig()
) -> list[tuple[int, Classification]]:
    """Classify every connected painted region a cluster touches.

    Palette-colored pixels inside the cluster box seed connected regions of
    painted pixels (palette colors or red) searched within ``grow_margin``
    pixels of the box: feature differences fire mostly on the edges of a
    painted rectangle, so the cluster box alone can clip it. Red dot pixels
    link a region but never vote. Returns ``(seed_count, classification)``
    for each accepted region.
    """
    h, w = y_hat.shape[:2]
    r0, c0, r1, c1 = c.bbox
    m = cfg.grow_margin
    wr0, wc0 = max(0, r0 - m), max(0, c0 - m)
    wr1, wc1 = min(h, r1 + 1 + m), min(w, c1 + 1 + m)
    region = assign_colors(y_hat[wr0:wr1, wc0:wc1], palette, cfg)
    seeds = np.zeros(region.shape, dtype=bool)
    seeds[r0 - wr0 : r1 + 1 - wr0, c0 - wc0 : c1 + 1 - wc0] = True
    seeds &= region >= 0
    comps, _ = ndimage.label(region != -1, structure=np.ones((3, 3), dtype=bool))
    out = []
    for label in np.unique(comps[seeds]):
        mask = (comps == label) & (region >= 0)
        cls = _classify_mask(region, mask, (wr0, wc0), len(palette), cfg)
        if cls is not None:
            out.append((int((seeds & (comps == label)).sum()), cls))
    return out


def classify_cluster(
    c: Cluster, y_hat: np.ndarray, palette: Palette, cfg: PostprocConfig = PostprocConfig()
) -> Classification | None:
    """Class, score and painted extent of the region a cluster mostly covers, or ``None``.

    The winning class is the majority palette color; the score is its share
    of the non-red pixels in the region's extent.
    """
    found = painted_regions(c, y_hat, palette, cfg)
    if not found:
        return None
    return max(found, key=lambda item: item[0])[1]


def _has_center_dot(y_hat: np.ndarray, extent: tuple[int, int, int, int], cfg: PostprocConfig) -> bool:
    c0, r0, c1, r1 = extent
    rc, cc = (r0 + r1) // 2, (c0 + c1) // 2
    win = y_hat[max(0, rc - 1) : rc + 2, max(0, cc - 1) : cc + 2].reshape(-1, 3).astype(float)
    return bool((np.linalg.norm(win - np.array(RED), axis=1) < cfg.red_guard).any())


def recover_box(cls: Classification, style: AnnotationStyle, width: int, height: int) -> BBox:
    """Map a painted extent back to a full-size normalized box."""
    c0, r0, c1, r1 = cls.extent
    r = style.shrink_ratio
    cx, w = decode_extent(c0, c1, r, width)
    cy, h = decode_extent(r0, r1, r, height)
    return unshrink_box(BBox(cls.class_id, cx, cy, w, h, cls.score), r)


def nms(boxes: Sequence[BBox], iou_thr: float = 0.5) -> list[BBox]:
    """Greedy per-class suppression; higher scores win, ties keep input order."""
    kept: list[BBox] = []
    for b in sorted(boxes, key=lambda b: -b.score):
        if all(k.class_id != b.class_id or iou(k, b) < iou_thr for k in kept):
            kept.append(b)
    return kept


@dataclass
class DetectionSet:
    image_id: int
    detections: list[BBox]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "detections": [
                {"class": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "score": b.score}
                for b in self.detections
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DetectionSet":
        return cls(
            int(doc["image_id"]),
            [
                BBox(int(d["class"]), float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), float(d["score"]))
                for d in doc["detections"]
            ],
        )


def save_results(path: str | Path, sets: Sequence[DetectionSet]) -> None:
    Path(path).write_text(json.dumps([s.to_json() for s in sets], indent=1))


def load_results(path: str | Path) -> list[DetectionSet]:
    return [DetectionSet.from_json(d) for d in json.loads(Path(path).read_text())]


def detect(
    x: np.ndarray,
    y_hat: np.ndarray,
    fx: Callable[[np.ndarray], list[torch.Tensor]],
    palette: Palette,
    style: AnnotationStyle = AnnotationStyle(),
    cfg: PostprocConfig = PostprocConfig(),
    image_id: int = 0,
) -> DetectionSet:
    h, w = x.shape[:2]
    diff = feature_diff(x, y_hat, fx)
    points = binarize(diff, cfg.k_sigma)
    found = []
    seen = set()
    for cluster in dbscan(points, cfg.eps, cfg.min_pts):
        for _, cls in painted_regions(cluster, y_hat, palette, cfg):
            if cls.extent in seen:
                continue
            seen.add(cls.extent)
            if cfg.verify_center and not _has_center_dot(y_hat, cls.extent, cfg):
                continue
            found.append(recover_box(cls, style, w, h))
    if cfg.nms:
        found = nms(found, cfg.nms_iou)
    return DetectionSet(image_id, found)
