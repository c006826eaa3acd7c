"""Annotation codec: paint shrunk, class-colored boxes with red center dots.

Images are ``uint8`` arrays of shape ``(H, W, 3)``. Boxes live in normalized
``(cx, cy, w, h)`` coordinates relative to image width/height.
"""

from __future__ import annotations

import colorsys
import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

RED = (255, 0, 0)
MAX_CLASSES = 40
# hue ring alone keeps pairwise distance >= 60 up to this many classes
_RING_MAX = 14
_MIN_PAIR_DIST = 60.0
_MIN_RED_DIST = 100.0
# palette colors stay this far from the gray content band [30, 220]
_MIN_GRAY_DIST = 100.0
_GRAY_BAND = (30.0, 220.0)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise CodecError(f"non-finite box {vals}")
        if not (self.w > 0 and self.h > 0):
            raise CodecError(f"box needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise CodecError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise CodecError(f"negative class_id {self.class_id}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(
        cls, class_id: int, x0: float, y0: float, x1: float, y1: float, score: float = 1.0
    ) -> "BBox":
        return cls(class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, score)

    def clamped(self) -> "BBox":
        """Clip the extent to the unit square; the center follows the clipped extent."""
        if self.x0 >= 0 and self.y0 >= 0 and self.x1 <= 1 and self.y1 <= 1:
            return self
        x0, x1 = max(0.0, self.x0), min(1.0, self.x1)
        y0, y1 = max(0.0, self.y0), min(1.0, self.y1)
        return BBox.from_corners(self.class_id, x0, y0, x1, y1, self.score)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        return self.x0 * width, self.y0 * height, self.x1 * width, self.y1 * height


@dataclass(frozen=True)
class Palette:
    colors: tuple[tuple[int, int, int], ...]
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.colors)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": i, "name": n, "rgb": list(c)}
                for i, (n, c) in enumerate(zip(self.class_names, self.colors))
            ]
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Palette":
        entries = sorted(doc["classes"], key=lambda e: e["id"])
        return cls(
            tuple(tuple(int(v) for v in e["rgb"]) for e in entries),  # type: ignore[misc]
            tuple(e["name"] for e in entries),
        )


@dataclass(frozen=True)
class AnnotationStyle:
    shrink_ratio: float = 1 / 3
    dot_radius_px: int = 2
    dot_color: tuple[int, int, int] = RED
    dots: bool = True
    # "image" paints over the input; "white" paints on a blank canvas
    background: str = "image"

    def __post_init__(self) -> None:
        if not 0 < self.shrink_ratio <= 1:
            raise CodecError(f"shrink_ratio must be in (0, 1], got {self.shrink_ratio}")
        if self.dot_radius_px < 0:
            raise CodecError(f"dot_radius_px must be >= 0, got {self.dot_radius_px}")
        if self.background not in ("image", "white"):
            raise CodecError(f"background must be 'image' or 'white', got {self.background!r}")


VARIANTS = {
    "a": AnnotationStyle(shrink_ratio=1.0, dots=False, background="white"),
    "b": AnnotationStyle(shrink_ratio=1.0, dots=False),
    "c": AnnotationStyle(dots=False),
    "d": AnnotationStyle(),
}


def style_variant(name: str, base: AnnotationStyle | None = None) -> AnnotationStyle:
    """The target-image encodings compared in the ablation (a: white canvas, ... d: default).

    ``base`` supplies shrink ratio and dot radius for the shrunk variants.
    """
    if name not in VARIANTS:
        raise CodecError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[name]
    if base is not None and name in ("c", "d"):
        v = replace(v, shrink_ratio=base.shrink_ratio, dot_radius_px=base.dot_radius_px)
    return v


# --------------------------------------------------------------------------
# palette


def _hsv_rgb(hue_deg: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue_deg / 360.0, 1.0, 1.0)
    return (int(r * 255 + 0.5), int(g * 255 + 0.5), int(b * 255 + 0.5))


def _gray_distance(c: np.ndarray) -> np.ndarray:
    level = np.clip(c.mean(axis=-1), *_GRAY_BAND)
    return np.linalg.norm(c - level[..., None], axis=-1)


def _extension_candidates() -> np.ndarray:
    levels = np.arange(0, 256, 15, dtype=np.float64)
    cand = np.array(list(itertools.product(levels, levels, levels)))
    keep = (np.linalg.norm(cand - np.array(RED), axis=1) >= _MIN_RED_DIST) & (
        _gray_distance(cand) >= _MIN_GRAY_DIST
    )
    return cand[keep]


def make_palette(k: int, class_names: Sequence[str] | None = None) -> Palette:
    """K class colors, well separated from each other, from red, and from gray.

    Hues are evenly spaced on [30, 330] degrees at full saturation/value. Past
    14 classes the hue ring gets too dense, so the remaining colors are picked
    by farthest-point sampling over a fixed RGB lattice.
    """
    if not 1 <= k <= MAX_CLASSES:
        raise CodecError(f"number of classes must be in [1, {MAX_CLASSES}], got {k}")
    if class_names is None:
        class_names = [f"class{i}" for i in range(k)]
    if len(class_names) != k:
        raise CodecError(f"{len(class_names)} class names for {k} classes")
    ring = min(k, _RING_MAX)
    colors = [_hsv_rgb(30 + i * 300 / ring) for i in range(ring)]
    if k > ring:
        cand = _extension_candidates()
        dist = np.min([np.linalg.norm(cand - np.array(c), axis=1) for c in colors], axis=0)
        while len(colors) < k:
            i = int(np.argmax(dist))
            colors.append(tuple(int(v) for v in cand[i]))  # type: ignore[arg-type]
            dist = np.minimum(dist, np.linalg.norm(cand - cand[i], axis=1))
    palette = Palette(tuple(colors), tuple(class_names))
    check_palette(palette)
    return palette


def check_palette(palette: Palette) -> None:
    c = palette.as_array()
    for i, j in itertools.combinations(range(len(c)), 2):
        d = float(np.linalg.norm(c[i] - c[j]))
        if d < _MIN_PAIR_DIST:
            raise CodecError(f"palette colors {i} and {j} only {d:.1f} apart")
    dred = np.linalg.norm(c - np.array(RED), axis=1)
    if (dred < _MIN_RED_DIST).any():
        raise CodecError(f"palette color {int(np.argmin(dred))} too close to red")


def save_palette(palette: Palette, path: str | Path) -> None:
    Path(path).write_text(json.dumps(palette.to_json(), indent=2))


def load_palette(path: str | Path) -> Palette:
    return Palette.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# geometry


def shrink_box(b: BBox, r: float) -> BBox:
    if not 0 < r <= 1:
        raise CodecError(f"shrink ratio must be in (0, 1], got {r}")
    return replace(b, w=b.w * r, h=b.h * r)


def unshrink_box(b: BBox, r: float) -> BBox:
    if not 0 < r <= 1:
        raise CodecError(f"shrink ratio must be in (0, 1], got {r}")
    return replace(b, w=b.w / r, h=b.h / r).clamped()


def _snap(v: float) -> float:
    # x0*W lands a hair off an integer after float arithmetic; don't let that
    # flip floor/ceil by a whole pixel
    rv = round(v)
    return float(rv) if abs(v - rv) < 1e-6 else v


def pixel_span(lo: float, hi: float, size: int, center: float) -> tuple[int, int]:
    """Half-open pixel range ``[floor(lo*size), ceil(hi*size))`` clipped to the image.

    An empty range collapses to the single pixel containing ``center``.
    """
    a = max(0, math.floor(_snap(lo * size)))
    b = min(size, math.ceil(_snap(hi * size)))
    if b <= a:
        c = min(size - 1, max(0, math.floor(center * size)))
        return c, c + 1
    return a, b


def box_pixels(b: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """``(col0, row0, col1, row1)`` half-open pixel rectangle covered by ``b``."""
    c0, c1 = pixel_span(b.x0, b.x1, width, b.cx)
    r0, r1 = pixel_span(b.y0, b.y1, height, b.cy)
    return c0, r0, c1, r1


def dot_mask(cx: float, cy: float, radius: int, width: int, height: int) -> np.ndarray:
    """Pixels whose centers lie within ``radius`` of ``(cx, cy)`` (pixel units)."""
    jj = np.arange(width) + 0.5
    ii = np.arange(height) + 0.5
    d2 = (jj[None, :] - cx) ** 2 + (ii[:, None] - cy) ** 2
    mask = d2 <= radius * radius
    ci = min(height - 1, max(0, math.floor(cy)))
    cj = min(width - 1, max(0, math.floor(cx)))
    mask[ci, cj] = True
    return mask


def paint_order(boxes: Sequence[BBox]) -> list[BBox]:
    return sorted(boxes, key=lambda b: (-b.area, b.class_id, b.cx, b.cy))


def render_annotation(
    image: np.ndarray,
    boxes: Sequence[BBox],
    style: AnnotationStyle = AnnotationStyle(),
    palette: Palette | None = None,
) -> np.ndarray:
    """Paint every box as an opaque rectangle of its class color, then the center dots.

    Larger boxes are painted first so small ones stay on top.
    """
    if palette is None:
        raise CodecError("render_annotation needs a palette")
    h, w = image.shape[:2]
    out = np.full_like(image, 255) if style.background == "white" else image.copy()
    if not boxes:
        return out
    for b in boxes:
        if not 0 <= b.class_id < len(palette):
            raise CodecError(f"class_id {b.class_id} outside palette of {len(palette)} colors")
    for b in paint_order(boxes):
        c0, r0, c1, r1 = box_pixels(shrink_box(b, style.shrink_ratio), w, h)
        out[r0:r1, c0:c1] = palette.colors[b.class_id]
    if style.dots:
        for b in boxes:
            mask = dot_mask(b.cx * w, b.cy * h, style.dot_radius_px, w, h)
            out[mask] = style.dot_color
    return out


def decode_extent(p0: int, p1: int, r: float, size: int) -> tuple[float, float]:
    """Recover ``(center, shrunk_length)`` in normalized units from a painted pixel run.

    Assumes the original box edges sit on the pixel grid (true for raster
    annotations). Every integer full length consistent with the run under the
    rendering rule is enumerated and the middle candidate is returned, which
    bounds the error by half the candidate spread. Falls back to the raw run
    when no candidate fits.
    """
    n = p1 - p0
    center = (p0 + p1) / 2
    two_c = round(2 * center)
    candidates = []
    for full in range(1, size + 1):
        if (two_c - full) % 2:
            continue
        half = r * full / 2
        a = max(0, math.floor(_snap(center - half)))
        b = min(size, math.ceil(_snap(center + half)))
        if b <= a:
            a, b = math.floor(center), math.floor(center) + 1
        if (a, b) == (p0, p1):
            candidates.append(full)
    if candidates:
        full = (candidates[0] + candidates[-1]) / 2
        return center / size, r * full / size
    return center / size, n / size


# --------------------------------------------------------------------------
# PPM I/O


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise CodecError(f"expected uint8 HxWx3 image, got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise CodecError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise CodecError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if data.size != w * h * 3:
        raise CodecError(f"{path}: expected {w * h * 3} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3).copy()
