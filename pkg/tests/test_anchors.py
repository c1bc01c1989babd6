import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lattice_anchors
from smallface.anchors import (AnchorDesign, ImageTooSmallError, anchor_count, baseline_design,
                               coverage_histogram, max_iou_brute_force, sfs_design, tile_anchors,
                               write_coverage_csv)


def test_sfs_sides():
    d = sfs_design()
    assert [d.sides(b) for b in range(4)] == [(4, 8), (16, 32), (64, 128), (256, 512)]
    assert d.all_sides() == [4, 8, 16, 32, 64, 128, 256, 512]


def test_three_branch_baseline():
    d = baseline_design(16, three_branch=True)
    assert d.branches == (1, 2, 3)
    assert [d.sides(b) for b in d.branches] == [(16, 32), (64, 128), (256, 512)]


def test_baseline_base_size_checks():
    with pytest.raises(ValueError):
        baseline_design(0)
    with pytest.warns(UserWarning):
        baseline_design(5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        baseline_design(8)


@settings(max_examples=50, deadline=None)
@given(st.integers(32, 200), st.integers(32, 200))
def test_tiling_matches_lattice_enumeration(h, w):
    d = sfs_design()
    a = tile_anchors(d, h, w)
    for b in range(4):
        ref = lattice_anchors(h, w, d.strides[b], d.sides(b))
        assert np.array_equal(a.branch(b), ref)
        assert len(ref) == anchor_count(d, h, w, b)
        assert a.grids[b] == (-(-h // d.strides[b]), -(-w // d.strides[b]))


def test_anchor_meta_layout():
    a = tile_anchors(sfs_design(), 64, 32)
    m = a.meta[a.branch_slices[0]]
    # row-major cells, ratio innermost
    assert m[:4].tolist() == [[0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [0, 0, 1, 1]]
    assert set(a.branch_ids.tolist()) == {0, 1, 2, 3}


def test_too_small_image():
    with pytest.raises(ImageTooSmallError, match="minimum stride coverage"):
        tile_anchors(sfs_design(), 31, 64)


def test_design_validation():
    with pytest.raises(ValueError):
        AnchorDesign(strides=(4, 8, 16, 64))
    with pytest.raises(ValueError):
        AnchorDesign(branches=(4,))


def test_coverage_matches_brute_force():
    d = sfs_design()
    records, _ = coverage_histogram(d, [5, 12, 23], image_size=256, step=4.0)
    origin = 128
    for r in records[::7]:
        cx, cy = origin + r.offset_x, origin + r.offset_y
        s = r.face_side
        face = np.array([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2])
        assert r.max_iou == pytest.approx(max_iou_brute_force(d, face, 256), abs=1e-12)


def test_four_pixel_face_against_four_pixel_anchors():
    # a 4-px face half a stride off the lattice overlaps its 4-px anchor by 2x2 of 28 px union
    records, _ = coverage_histogram(sfs_design(), [4], step=1.0, anchor_sides=[4])
    r = next(r for r in records if (r.offset_x, r.offset_y) == (0.0, 0.0))
    assert r.max_iou == pytest.approx(4 / 28)
    r = next(r for r in records if (r.offset_x, r.offset_y) == (2.0, 2.0))
    assert r.max_iou == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 10))
def test_sfs_dominates_bs16_on_very_small_faces(side):
    _, a = coverage_histogram(sfs_design(), [side], step=2.0)
    _, b = coverage_histogram(baseline_design(16), [side], step=2.0)
    assert a[0].mean >= b[0].mean


def test_sfs_does_not_dominate_bs16_everywhere():
    # between the 8-px and 16-px anchors a 16-px anchor at stride 4 fits better
    _, a = coverage_histogram(sfs_design(), [12], step=1.0)
    _, b = coverage_histogram(baseline_design(16), [12], step=1.0)
    assert a[0].mean < b[0].mean


def test_coverage_csv(tmp_path):
    records, _ = coverage_histogram(sfs_design(), [8], step=16.0)
    p = tmp_path / "cov.csv"
    write_coverage_csv(p, records)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["face_side", "offset_x", "offset_y", "max_iou", "branch_of_argmax"]
    assert len(rows) == 1 + 4
    assert rows[1][:3] == ["8", "0", "0"]
