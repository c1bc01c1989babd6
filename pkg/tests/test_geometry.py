import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_nms, raster_iou, scalar_iou
from smallface.geometry import (BoundingBox, DegenerateGeometryError, Detection, Ellipse, box_to_ellipse,
                                ellipse_to_box, iou, iou_matrix, nms, nms_indices)

coord = st.floats(-200, 200, allow_nan=False)
size = st.floats(0.5, 150, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return BoundingBox(x, y, x + w, y + h)


@st.composite
def int_boxes(draw):
    x, y = draw(st.integers(0, 30)), draw(st.integers(0, 30))
    w, h = draw(st.integers(1, 20)), draw(st.integers(1, 20))
    return (x, y, x + w, y + h)


def test_from_xywh_and_props():
    b = BoundingBox.from_xywh(10, 20, 30, 40)
    assert (b.x1, b.y1, b.x2, b.y2) == (10, 20, 40, 60)
    assert b.width == 30 and b.height == 40 and b.area == 1200
    assert b.center == (25, 40)


def test_inverted_box_rejected():
    with pytest.raises(ValueError):
        BoundingBox(10, 0, 5, 5)


def test_iou_known_values():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(5, 0, 15, 10)) == pytest.approx(50 / 150)
    assert iou(a, BoundingBox(10, 0, 20, 10)) == 0.0
    assert iou(a, BoundingBox(3, 3, 3, 8)) == 0.0


@given(int_boxes(), int_boxes())
def test_iou_matches_rasterization(a, b):
    assert abs(iou(BoundingBox(*a), BoundingBox(*b)) - raster_iou(a, b)) <= 1e-6


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)


@given(boxes(), st.floats(0.1, 10), st.floats(-50, 50), st.floats(-50, 50))
def test_iou_invariant_to_similarity(b, f, dx, dy):
    other = BoundingBox(b.x1 + 3, b.y1 - 2, b.x2 + 5, b.y2 + 1)
    base = iou(b, other)
    assert iou(b.scaled(f), other.scaled(f)) == pytest.approx(base, abs=1e-9)
    assert iou(b.translated(dx, dy), other.translated(dx, dy)) == pytest.approx(base, abs=1e-9)


@given(st.lists(boxes(), min_size=1, max_size=8), st.lists(boxes(), min_size=1, max_size=8))
def test_iou_matrix_matches_pairwise(xs, ys):
    m = iou_matrix(np.array([b.as_array() for b in xs]), np.array([b.as_array() for b in ys]))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == pytest.approx(scalar_iou(a.as_array(), b.as_array()), abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.tuples(int_boxes(), st.integers(0, 5)), min_size=0, max_size=30),
       st.sampled_from([0.0, 0.3, 0.5, 0.7]))
def test_nms_matches_quadratic_reference(items, thr):
    bx = np.array([b for b, _ in items], dtype=float).reshape(-1, 4)
    sc = np.array([s / 5 for _, s in items])
    assert nms_indices(bx, sc, thr) == brute_nms(bx, sc, thr)


@given(st.lists(st.tuples(int_boxes(), st.integers(0, 10)), min_size=1, max_size=20))
def test_nms_output_properties(items):
    bx = np.array([b for b, _ in items], dtype=float)
    sc = np.array([s / 10 for _, s in items])
    keep = nms_indices(bx, sc, 0.3)
    assert list(sc[keep]) == sorted(sc[keep], reverse=True)
    assert len(set(keep)) == len(keep)
    ov = iou_matrix(bx[keep], bx[keep])
    np.fill_diagonal(ov, 0)
    assert np.all(ov <= 0.3)
    # idempotent
    assert nms_indices(bx[keep], sc[keep], 0.3) == list(range(len(keep)))


def test_nms_detection_wrapper_tie_keeps_input_order():
    a = Detection(BoundingBox(0, 0, 10, 10), 0.9)
    b = Detection(BoundingBox(1, 1, 11, 11), 0.9)
    assert nms([a, b], 0.3) == [a]
    assert nms([b, a], 0.3) == [b]
    assert nms([], 0.3) == []


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(BoundingBox(0, 0, 1, 1), 1.5)
    with pytest.raises(ValueError):
        Detection(BoundingBox(0, 0, 1, 1), 0.5, branch=4)


def test_box_to_ellipse_orientation():
    e = box_to_ellipse(BoundingBox(0, 0, 10, 20))
    assert (e.cx, e.cy, e.ra, e.rb) == (5, 10, 10, 5)
    assert e.theta == pytest.approx(math.pi / 2)
    e = box_to_ellipse(BoundingBox(0, 0, 20, 10))
    assert e.ra == 10 and e.rb == 5 and e.theta == 0.0
    with pytest.raises(DegenerateGeometryError):
        box_to_ellipse(BoundingBox(0, 0, 0, 10))


@given(boxes())
def test_box_ellipse_round_trip(b):
    r = ellipse_to_box(box_to_ellipse(b))
    assert np.allclose(r.as_array(), b.as_array(), atol=1e-6 * (1 + np.abs(b.as_array()).max()))


@given(st.floats(1, 50), st.floats(1, 50), st.floats(-3, 3))
def test_ellipse_normalized_swaps_axes(a, b, t):
    e = Ellipse.normalized(0, 0, a, b, t)
    assert e.ra >= e.rb
    # same set of points, so the same tight box
    ref = ellipse_to_box(Ellipse.normalized(0, 0, max(a, b), min(a, b), t if a >= b else t + math.pi / 2))
    assert np.allclose(ellipse_to_box(e).as_array(), ref.as_array())


def test_ellipse_rejects_bad_axes():
    with pytest.raises(ValueError):
        Ellipse(0, 0, 2, 3, 0)
    with pytest.raises(ValueError):
        Ellipse(0, 0, 2, 0, 0)


def test_hflip():
    b = BoundingBox(10, 5, 30, 25).hflipped(100)
    assert b.as_array().tolist() == [70, 5, 90, 25]
