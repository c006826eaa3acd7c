"""Synthetic shapes scenes and the on-disk dataset (PPM images + JSON index)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import BBox, box_pixels, read_ppm, shrink_box, write_ppm
from .metrics import iou

SHAPES = ("circle", "square", "triangle", "ellipse", "cross")


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingImageError(DatasetError):
    pass


class MalformedIndexError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class BoxRangeError(DatasetError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 5
    min_objects: int = 1
    max_objects: int = 6
    min_size: int = 12
    max_size: int = 30
    max_iou: float = 0.3
    # when set, shrunk boxes (at shrink_ratio) must keep this many pixels apart
    shrunk_gap: int | None = None
    shrink_ratio: float = 1 / 3
    max_attempts: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}], got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 6 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 6 <= min_size <= max_size <= image_size")

    @property
    def class_names(self) -> list[str]:
        return list(SHAPES[: self.num_classes])


# --------------------------------------------------------------------------
# rasterization


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.mgrid[0:size, 0:size]
    return ii.astype(np.float64), jj.astype(np.float64)


def shape_mask(kind: str, ci: float, cj: float, s: int, size: int, aspect: float = 1.0) -> np.ndarray:
    """Boolean mask of a shape with nominal extent ``s`` centered at pixel ``(ci, cj)``."""
    ii, jj = _grid(size)
    di, dj = ii - ci, jj - cj
    r = (s - 1) / 2
    if kind == "circle":
        return di * di + dj * dj <= r * r
    if kind == "square":
        return (np.abs(di) <= r) & (np.abs(dj) <= r)
    if kind == "ellipse":
        rj, ri = r, r / aspect
        return (dj / rj) ** 2 + (di / ri) ** 2 <= 1.0
    if kind == "triangle":
        # apex up; half-width grows linearly from apex to base
        frac = (di + r) / (2 * r)
        return (frac >= 0) & (frac <= 1) & (np.abs(dj) <= frac * r + 0.5)
    if kind == "cross":
        arm = max(1.0, s / 6)
        box = (np.abs(di) <= r) & (np.abs(dj) <= r)
        return box & ((np.abs(di) <= arm) | (np.abs(dj) <= arm))
    raise ValueError(f"unknown shape {kind!r}")


def mask_box(mask: np.ndarray, class_id: int) -> BBox:
    """Tight box around a mask: inclusive pixel extents mapped to normalized corners."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox.from_corners(
        class_id,
        float(cols[0]) / w,
        float(rows[0]) / h,
        float(cols[-1] + 1) / w,
        float(rows[-1] + 1) / h,
    )


def _shrunk_clear(a: BBox, b: BBox, spec: SceneSpec) -> bool:
    n = spec.image_size
    ac0, ar0, ac1, ar1 = box_pixels(shrink_box(a, spec.shrink_ratio), n, n)
    bc0, br0, bc1, br1 = box_pixels(shrink_box(b, spec.shrink_ratio), n, n)
    g = spec.shrunk_gap or 0
    return ac1 + g <= bc0 or bc1 + g <= ac0 or ar1 + g <= br0 or br1 + g <= ar0


def _background(rng: np.random.Generator, n: int) -> np.ndarray:
    ii, jj = _grid(n)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * jj + np.sin(angle) * ii) / n
    lo, hi = sorted(rng.uniform(155, 215, size=2))
    base = lo + (hi - lo) * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    texture = rng.normal(0.0, 4.0, size=(n, n))
    return np.clip(base + texture, 150, 220)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[BBox]]:
    """Draw one grayscale scene of random shapes and return it with tight boxes.

    Placements are rejection-sampled so no two boxes exceed ``max_iou``
    (and, if ``shrunk_gap`` is set, shrunk boxes stay apart). An object that
    fails ``max_attempts`` placements is dropped.
    """
    n = spec.image_size
    canvas = _background(rng, n)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[BBox] = []
    for _ in range(count):
        cls = int(rng.integers(spec.num_classes))
        kind = SHAPES[cls]
        fill = float(rng.integers(40, 141))
        for _attempt in range(spec.max_attempts):
            aspect = float(rng.uniform(1.4, 1.8)) if kind == "ellipse" else 1.0
            # the minor axis of an ellipse also respects min_size
            lo = min(spec.max_size, math.ceil(spec.min_size * aspect))
            s = int(rng.integers(lo, spec.max_size + 1))
            half = (s - 1) / 2
            if n - 2 * math.ceil(half) < 1:
                continue  # an even size spanning the image has no integer center
            ci = float(rng.integers(math.ceil(half), n - math.ceil(half)))
            cj = float(rng.integers(math.ceil(half), n - math.ceil(half)))
            mask = shape_mask(kind, ci, cj, s, n, aspect)
            if mask.sum() == 0:
                continue
            box = mask_box(mask, cls)
            if any(iou(box, o) > spec.max_iou for o in boxes):
                continue
            if spec.shrunk_gap is not None and not all(_shrunk_clear(box, o, spec) for o in boxes):
                continue
            canvas[mask] = fill
            boxes.append(box)
            break
    img = np.repeat(np.round(canvas).astype(np.uint8)[:, :, None], 3, axis=2)
    return img, boxes


def generate_overlap_scene(
    spec: SceneSpec, rng: np.random.Generator, pairs: int = 2, iou_range: tuple[float, float] = (0.15, 0.45)
) -> tuple[np.ndarray, list[BBox]]:
    """Scene of deliberately overlapping pairs of differently-classed shapes.

    Within a pair the gt IoU lies in ``iou_range``; distinct pairs do not
    touch. Stress data for how painted boxes merge at large shrink ratios.
    """
    if spec.num_classes < 2:
        raise ValueError("overlap scenes need at least two classes")
    n = spec.image_size
    canvas = _background(rng, n)
    boxes: list[BBox] = []
    for _ in range(pairs):
        for _attempt in range(spec.max_attempts):
            drawn = []
            classes = rng.choice(spec.num_classes, size=2, replace=False)
            for k, cls in enumerate(classes):
                kind = SHAPES[int(cls)]
                aspect = float(rng.uniform(1.4, 1.8)) if kind == "ellipse" else 1.0
                lo = min(spec.max_size, math.ceil(spec.min_size * aspect))
                s = int(rng.integers(lo, spec.max_size + 1))
                half = math.ceil((s - 1) / 2)
                if n - 2 * half < 1:
                    break
                if k == 0:
                    ci, cj = rng.integers(half, n - half, size=2)
                else:
                    # offset the partner by a fraction of the first object's size
                    off = rng.uniform(0.3, 0.7, size=2) * first_size * rng.choice([-1, 1], size=2)
                    ci, cj = np.clip(np.round(np.array([ci0, cj0]) + off), half, n - 1 - half)
                mask = shape_mask(kind, float(ci), float(cj), s, n, aspect)
                if k == 0:
                    ci0, cj0, first_size = float(ci), float(cj), s
                drawn.append((mask, mask_box(mask, int(cls))))
            if len(drawn) < 2:
                continue
            (m0, b0), (m1, b1) = drawn
            if not iou_range[0] <= iou(b0, b1) <= iou_range[1]:
                continue
            if any(iou(b, o) > 0 for b in (b0, b1) for o in boxes):
                continue
            fills = rng.integers(40, 141, size=2)
            canvas[m0] = fills[0]
            canvas[m1] = fills[1]
            boxes.extend([b0, b1])
            break
    img = np.repeat(np.round(canvas).astype(np.uint8)[:, :, None], 3, axis=2)
    return img, boxes


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# --------------------------------------------------------------------------
# dataset persistence


@dataclass
class Entry:
    id: int
    file: str
    width: int
    height: int
    boxes: list[BBox] = field(default_factory=list)


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    entries: list[Entry]

    def __len__(self) -> int:
        return len(self.entries)

    def image(self, i: int) -> np.ndarray:
        return read_ppm(self.root / self.entries[i].file)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.root, self.classes, [self.entries[i] for i in indices])

    def to_index(self) -> dict:
        return {
            "classes": list(self.classes),
            "images": [
                {
                    "id": e.id,
                    "file": e.file,
                    "width": e.width,
                    "height": e.height,
                    "boxes": [
                        {"class": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                        for b in e.boxes
                    ],
                }
                for e in self.entries
            ],
        }


INDEX_NAME = "index.json"


def write_dataset(
    path: str | Path,
    classes: Sequence[str],
    samples: Iterable[tuple[np.ndarray, list[BBox]]],
) -> Dataset:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, boxes) in enumerate(samples):
        name = f"images/{i:06d}.ppm"
        write_ppm(root / name, img)
        entries.append(Entry(i, name, img.shape[1], img.shape[0], list(boxes)))
    ds = Dataset(root, list(classes), entries)
    (root / INDEX_NAME).write_text(json.dumps(ds.to_index(), indent=1))
    return ds


def generate_dataset(
    path: str | Path, spec: SceneSpec, count: int, start: int = 0, overlap: bool = False
) -> Dataset:
    make = generate_overlap_scene if overlap else generate_scene
    scenes = (make(spec, scene_rng(spec.seed, start + i)) for i in range(count))
    return write_dataset(path, spec.class_names, scenes)


def _ppm_dims(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(64).split()
    return int(head[1]), int(head[2])


def read_dataset(path: str | Path, check_images: bool = True) -> Dataset:
    root = Path(path)
    index_path = root / INDEX_NAME
    if not index_path.exists():
        raise MissingImageError(f"{index_path}: dataset index not found")
    try:
        doc = json.loads(index_path.read_text())
        classes = [str(c) for c in doc["classes"]]
        raw_entries = doc["images"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedIndexError(f"{index_path}: {exc}") from exc
    entries = []
    for item in raw_entries:
        try:
            boxes = [
                BBox(int(b["class"]), float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]))
                for b in item["boxes"]
            ]
            entry = Entry(int(item["id"]), str(item["file"]), int(item["width"]), int(item["height"]), boxes)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedIndexError(f"{index_path}: bad image entry {item!r}: {exc}") from exc
        for b in boxes:
            if not (b.w > 0 and b.h > 0 and b.x0 >= -1e-9 and b.y0 >= -1e-9 and b.x1 <= 1 + 1e-9 and b.y1 <= 1 + 1e-9):
                raise BoxRangeError(f"image {entry.id}: box {b} outside [0, 1]")
            if not 0 <= b.class_id < len(classes):
                raise BoxRangeError(f"image {entry.id}: class {b.class_id} not in {len(classes)} classes")
        if check_images:
            img_path = root / entry.file
            if not img_path.exists():
                raise MissingImageError(f"image {entry.id}: file {entry.file} not found")
            w, h = _ppm_dims(img_path)
            if (w, h) != (entry.width, entry.height):
                raise DimensionMismatchError(
                    f"image {entry.id}: {entry.file} is {w}x{h}, index says {entry.width}x{entry.height}"
                )
        entries.append(entry)
    return Dataset(root, classes, entries)


# COCO/CrowdHuman adapter (untested): a COCO annotation ``bbox = [x, y, w, h]``
# in pixels maps to ``BBox(cat_index, (x + w/2)/W, (y + h/2)/H, w/W, h/H)``;
# category ids must be remapped to a dense 0..K-1 range matching the palette.
def coco_to_bbox(bbox: Sequence[float], class_id: int, width: int, height: int) -> BBox:
    x, y, w, h = bbox
    return BBox(class_id, (x + w / 2) / width, (y + h / 2) / height, w / width, h / height).clamped()
