import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_nms
from smallface.config import ConfigError, InferenceConfig, ScaleSet
from smallface.imaging import resize_image, scale_factor
from smallface.inference import (DetectionArrays, detect_arrays, detect_multiscale_arrays, face_probabilities,
                                 nms_arrays, top_k)
from smallface.network import build_network
from support import micro_config


@pytest.fixture(scope="module")
def net():
    n = build_network(micro_config())
    # bias the face logits up so an untrained net still emits detections
    for b in n.branches:
        bias = n.params[f"branch{b}.cls.bias"].data
        bias[1::2] += 1.0
    return n


def test_scale_factor_respects_max_size():
    assert scale_factor(100, 200, 500, 1600) == 5.0
    assert scale_factor(100, 400, 500, 1600) == 4.0


@given(st.integers(8, 40), st.integers(8, 40), st.floats(0.5, 3.0))
def test_resize_size_and_constant_image(h, w, f):
    img = np.full((2, h, w), 0.3)
    out = resize_image(img, f)
    assert out.shape == (2, max(1, round(h * f)), max(1, round(w * f)))
    assert np.allclose(out, 0.3)


def test_resize_maps_box_coordinates_exactly():
    # a linear ramp is reproduced exactly at the mapped coordinate
    x = np.arange(20, dtype=float)
    img = np.broadcast_to(x, (1, 10, 20)).copy()
    out = resize_image(img, 2.0)
    xs = (np.arange(out.shape[2]) + 0.5) / 2.0 - 0.5
    inner = (xs >= 0) & (xs <= 19)
    assert np.allclose(out[0, 0, inner], xs[inner])


def test_face_probabilities():
    p = face_probabilities(np.array([[0.0, 0.0], [0.0, np.log(3.0)]]))
    assert p == pytest.approx([0.5, 0.75])


def test_top_k_ties():
    assert top_k(np.array([0.5, 0.9, 0.5, 0.9]), 3).tolist() == [1, 3, 0]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(2, 20), st.integers(0, 9)),
                min_size=1, max_size=25))
def test_nms_arrays_matches_reference(items):
    boxes = np.array([[x, y, x + s, y + s] for x, y, s, _ in items], dtype=float)
    scores = np.array([c / 10 for *_, c in items])
    d = DetectionArrays(boxes, scores, np.zeros(len(items), np.int64), np.zeros(len(items), np.int64))
    out = nms_arrays(d, 0.3)
    assert out.boxes.tolist() == boxes[brute_nms(boxes, scores, 0.3)].tolist()


def test_box_voting_averages_cluster():
    boxes = np.array([[0, 0, 10, 10], [1, 0, 11, 10], [50, 50, 60, 60.0]])
    d = DetectionArrays(boxes, np.array([0.9, 0.9, 0.5]), np.zeros(3, np.int64), np.zeros(3, np.int64))
    out = nms_arrays(d, 0.3, box_voting=True)
    assert out.boxes[0] == pytest.approx([0.5, 0.0, 10.5, 10.0])
    assert out.boxes[1].tolist() == [50, 50, 60, 60]


def test_single_scale_detections_are_valid(net):
    image = np.random.default_rng(0).random((3, 48, 64))
    cfg = InferenceConfig(per_branch_topk=20, scale_set=ScaleSet((48,), 64))
    d = detect_arrays(net, image, cfg)
    assert len(d) > 0
    assert np.all(np.diff(d.scores) <= 0)
    assert np.all((d.scores >= cfg.score_threshold) & (d.scores <= 1))
    assert set(d.branches.tolist()) <= {0, 1, 2, 3}
    for b in range(4):
        assert (d.branches == b).sum() <= 20
    assert all(det.box.x2 >= det.box.x1 for det in d.to_list())


def test_multiscale_maps_back_and_is_thread_independent(net):
    image = np.random.default_rng(1).random((3, 40, 40))
    cfg1 = InferenceConfig(per_branch_topk=30, scale_set=ScaleSet((40, 60, 80), 100), threads=1)
    cfg3 = InferenceConfig(per_branch_topk=30, scale_set=ScaleSet((40, 60, 80), 100), threads=3)
    a = detect_multiscale_arrays(net, image, cfg1)
    b = detect_multiscale_arrays(net, image, cfg3)
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.scores, b.scores)
    assert set(a.scale_ids.tolist()) <= {0, 1, 2}
    # boxes found at scale 80 (factor 2) are that scale's own detections divided by 2
    own = detect_arrays(net, resize_image(image, 2.0), cfg1, 2).boxes / 2.0
    mine = a.boxes[a.scale_ids == 2]
    assert len(mine) and all(np.any(np.all(own == m, axis=1)) for m in mine)


def test_single_scale_set_equals_single_scale(net):
    image = np.random.default_rng(2).random((3, 50, 50))
    cfg = InferenceConfig(per_branch_topk=10, scale_set=ScaleSet((50,), 100))
    a = detect_multiscale_arrays(net, image, cfg)
    b = detect_arrays(net, image, cfg)
    assert np.array_equal(a.boxes, b.boxes)


def test_scale_set_validation():
    assert ScaleSet.preset("four").scales == (500, 800, 1200, 1600)
    assert ScaleSet.preset("wide").scales[-1] == 1600
    assert ScaleSet.preset("300,100").scales == (100, 300)
    with pytest.raises(ConfigError):
        ScaleSet((800, 500))
    with pytest.raises(ConfigError):
        ScaleSet.preset("bogus")
    with pytest.raises(ConfigError):
        InferenceConfig(nms_threshold=1.2)
