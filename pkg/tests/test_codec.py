import colorsys
import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxpaint.codec import (
    RED,
    AnnotationStyle,
    BBox,
    CodecError,
    box_pixels,
    decode_extent,
    dot_mask,
    load_palette,
    make_palette,
    paint_order,
    read_ppm,
    render_annotation,
    save_palette,
    shrink_box,
    style_variant,
    unshrink_box,
    write_ppm,
)

GOLDEN = Path(__file__).parent / "golden"
PAL5 = make_palette(5)


def gray(h=60, w=60, level=128):
    return np.full((h, w, 3), level, dtype=np.uint8)


# --------------------------------------------------------------------------
# palette


def test_palette_k1_is_hue_30():
    r, g, b = colorsys.hsv_to_rgb(30 / 360, 1, 1)
    assert make_palette(1).colors[0] == (255, 128, 0) == (round(r * 255), round(g * 255), round(b * 255))


@pytest.mark.parametrize("k", range(1, 41))
def test_palette_separation_exhaustive(k):
    c = make_palette(k).as_array()
    assert len(c) == k
    for i, j in itertools.combinations(range(k), 2):
        assert np.linalg.norm(c[i] - c[j]) >= 60
    assert (np.linalg.norm(c - np.array(RED), axis=1) >= 100).all()


def test_palette_range_rejected():
    for k in (0, 41, -3):
        with pytest.raises(CodecError):
            make_palette(k)


def test_palette_json_round_trip(tmp_path):
    p = make_palette(4, ["a", "b", "c", "d"])
    save_palette(p, tmp_path / "p.json")
    assert load_palette(tmp_path / "p.json") == p


# --------------------------------------------------------------------------
# geometry


def test_shrink_examples():
    b = BBox(2, 0.5, 0.5, 0.6, 0.3)
    s = shrink_box(b, 1 / 3)
    assert (s.cx, s.cy, s.class_id) == (0.5, 0.5, 2)
    assert s.w == pytest.approx(0.2, abs=1e-12) and s.h == pytest.approx(0.1, abs=1e-12)
    assert shrink_box(b, 1.0) == b
    u = unshrink_box(BBox(0, 0.5, 0.5, 0.2, 0.1), 1 / 3)
    assert u.w == pytest.approx(0.6, abs=1e-12) and u.h == pytest.approx(0.3, abs=1e-12)
    assert unshrink_box(b, 1.0) == b


def test_unshrink_clamps_at_border():
    b = unshrink_box(BBox(1, 0.1, 0.9, 0.1, 0.1), 1 / 3)
    assert b.x0 >= 0 and b.y1 <= 1 + 1e-12
    assert b.w > 0 and b.h > 0
    assert b.w < 0.3 + 1e-12


@settings(max_examples=200, deadline=None)
@given(
    cx=st.floats(0.2, 0.8),
    cy=st.floats(0.2, 0.8),
    w=st.floats(0.01, 0.39),
    h=st.floats(0.01, 0.39),
    r=st.sampled_from([1 / 2, 1 / 3, 1 / 4, 1.0]),
)
def test_shrink_round_trip(cx, cy, w, h, r):
    b = BBox(0, cx, cy, w, h)
    back = unshrink_box(shrink_box(b, r), r)
    for a, c in zip((back.cx, back.cy, back.w, back.h), (cx, cy, w, h)):
        assert abs(a - c) < 1e-9


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0, 0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        BBox(0, 0.5, 0.5, 0.1, 0.1, score=1.5)


# --------------------------------------------------------------------------
# rendering


def test_render_empty_is_copy():
    img = np.random.default_rng(0).integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
    out = render_annotation(img, [], AnnotationStyle(), PAL5)
    assert out.tobytes() == img.tobytes()
    assert out is not img


def test_render_single_box_pixel_count():
    img = gray()
    b = BBox(1, 0.5, 0.5, 0.6, 0.3)
    out = render_annotation(img, [b], AnnotationStyle(dots=False), PAL5)
    painted = np.all(out == PAL5.colors[1], axis=2)
    rows, cols = np.nonzero(painted)
    assert painted.sum() == 12 * 6
    assert (cols.min(), cols.max() + 1, rows.min(), rows.max() + 1) == (24, 36, 27, 33)
    # rectangle is centered on pixel coordinate 30
    assert (cols.min() + cols.max() + 1) / 2 == 30 and (rows.min() + rows.max() + 1) / 2 == 30
    with_dot = render_annotation(img, [b], AnnotationStyle(), PAL5)
    red = np.all(with_dot == RED, axis=2)
    assert red.sum() > 0
    assert np.all(with_dot == PAL5.colors[1], axis=2).sum() == 72 - (red & painted).sum()


def test_render_nested_small_on_top():
    big = BBox(0, 0.5, 0.5, 0.9, 0.9)
    small = BBox(2, 0.5, 0.5, 0.3, 0.3)
    for order in ([big, small], [small, big]):
        out = render_annotation(gray(), order, AnnotationStyle(dots=False), PAL5)
        c0, r0, c1, r1 = box_pixels(shrink_box(small, 1 / 3), 60, 60)
        assert np.all(out[r0:r1, c0:c1] == PAL5.colors[2])


def test_paint_order_ties():
    a = BBox(3, 0.2, 0.5, 0.2, 0.2)
    b = BBox(1, 0.7, 0.5, 0.2, 0.2)
    c = BBox(1, 0.3, 0.5, 0.2, 0.2)
    d = BBox(4, 0.5, 0.5, 0.4, 0.4)
    assert paint_order([a, b, c, d]) == [d, c, b, a]


def test_degenerate_box_one_pixel():
    b = BBox(0, 0.505, 0.505, 0.001, 0.001)
    assert box_pixels(b, 60, 60) == (30, 30, 31, 31)
    out = render_annotation(gray(), [b], AnnotationStyle(dots=False), PAL5)
    assert np.all(out == PAL5.colors[0], axis=2).sum() == 1


def test_render_rejects_bad_class():
    with pytest.raises(CodecError):
        render_annotation(gray(), [BBox(5, 0.5, 0.5, 0.2, 0.2)], AnnotationStyle(), PAL5)


def test_dot_mask_radius():
    m = dot_mask(10.0, 10.0, 2, 21, 21)
    ii, jj = np.nonzero(m)
    assert np.all((ii + 0.5 - 10) ** 2 + (jj + 0.5 - 10) ** 2 <= 4)
    assert m.sum() == 12
    assert dot_mask(3.2, 4.7, 0, 10, 10).sum() == 1


def test_palette_pixels_equal_rect_union_minus_dots():
    rng = np.random.default_rng(5)
    boxes = [BBox(0, 0.2, 0.2, 0.3, 0.3), BBox(1, 0.7, 0.3, 0.24, 0.3), BBox(2, 0.5, 0.75, 0.45, 0.3)]
    img = rng.integers(150, 221, size=(64, 64, 3), dtype=np.uint8)
    out = render_annotation(img, boxes, AnnotationStyle(), PAL5)
    dots = np.zeros((64, 64), dtype=bool)
    for b in boxes:
        dots |= dot_mask(b.cx * 64, b.cy * 64, 2, 64, 64)
    for k in range(3):
        expect = np.zeros((64, 64), dtype=bool)
        for b in boxes:
            if b.class_id == k:
                c0, r0, c1, r1 = box_pixels(shrink_box(b, 1 / 3), 64, 64)
                expect[r0:r1, c0:c1] = True
        assert np.array_equal(np.all(out == PAL5.colors[k], axis=2), expect & ~dots)


def test_variants_c_and_d_differ_only_at_dots():
    boxes = [BBox(0, 0.3, 0.3, 0.3, 0.3), BBox(3, 0.7, 0.6, 0.4, 0.2)]
    img = gray(64, 64, 180)
    c = render_annotation(img, boxes, style_variant("c"), PAL5)
    d = render_annotation(img, boxes, style_variant("d"), PAL5)
    diff = np.any(c != d, axis=2)
    assert diff.any()
    assert np.all(d[diff] == RED)


def test_variant_a_white_canvas_and_b_full_size():
    boxes = [BBox(0, 0.5, 0.5, 0.5, 0.25)]
    a = render_annotation(gray(64, 64, 90), boxes, style_variant("a"), PAL5)
    assert np.all(a[0, 0] == 255)
    b = render_annotation(gray(64, 64, 90), boxes, style_variant("b"), PAL5)
    assert np.all(b == PAL5.colors[0], axis=2).sum() == 32 * 16
    with pytest.raises(CodecError):
        style_variant("e")


def test_render_deterministic():
    boxes = [BBox(1, 0.4, 0.4, 0.3, 0.2), BBox(4, 0.6, 0.7, 0.2, 0.3)]
    a = render_annotation(gray(), boxes, AnnotationStyle(), PAL5)
    b = render_annotation(gray(), boxes, AnnotationStyle(), PAL5)
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------------
# golden renders


def golden_scene():
    ii, jj = np.mgrid[0:32, 0:32]
    img = np.stack([150 + 2 * ii, 160 + jj, 170 + ii + jj], axis=2).astype(np.uint8)
    boxes = [BBox(0, 0.25, 0.3, 0.375, 0.375), BBox(2, 0.7, 0.65, 0.5, 0.4), BBox(4, 0.7, 0.65, 0.2, 0.15)]
    return img, boxes


@pytest.mark.parametrize("variant", ["a", "b", "c", "d"])
def test_golden_variants(variant):
    img, boxes = golden_scene()
    out = render_annotation(img, boxes, style_variant(variant), PAL5)
    ref = read_ppm(GOLDEN / f"variant_{variant}.ppm")
    assert out.tobytes() == ref.tobytes()


# --------------------------------------------------------------------------
# decoding painted extents


@pytest.mark.parametrize("r", [1 / 2, 1 / 3, 1 / 4])
def test_decode_extent_brute_force(r):
    """Every integer-edged box: decoded center exact, length within the candidate spread."""
    size = 64
    for x0 in range(0, size - 6):
        for full in range(6, min(40, size - x0) + 1):
            b = BBox(0, (x0 + full / 2) / size, 0.5, full / size, 0.2)
            c0, _, c1, _ = box_pixels(shrink_box(b, r), size, size)
            cx, sw = decode_extent(c0, c1, r, size)
            assert abs(cx - b.cx) < 1e-12
            # lengths painting the same run span at most 2/r + 2 pixels
            assert abs(sw / r * size - full) <= 1 / r + 1


def test_decode_extent_is_consistent_with_rendering():
    size = 64
    for p0, p1 in [(10, 14), (20, 21), (0, 5), (60, 64)]:
        cx, sw = decode_extent(p0, p1, 1 / 3, size)
        b = BBox(0, cx, 0.5, sw, 0.1)
        c0, _, c1, _ = box_pixels(b, size, size)
        assert (c0, c1) == (p0, p1)


# --------------------------------------------------------------------------
# PPM


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(7, 9, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n9 7\n255\n")


def test_ppm_rejects_bad_input(tmp_path):
    with pytest.raises(CodecError):
        write_ppm(tmp_path / "x.ppm", np.zeros((4, 4), dtype=np.uint8))
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(CodecError):
        read_ppm(tmp_path / "bad.ppm")
