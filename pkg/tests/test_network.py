import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallface import engine as E
from smallface.anchors import baseline_design
from smallface.config import ConfigError, NetworkConfig
from smallface.network import (Network, build_network, check_tap_strides, flatten_slots, fmf_fuse,
                               unflatten_slots)
from support import micro_config


@pytest.fixture(scope="module")
def net():
    return build_network(micro_config())


@settings(max_examples=10, deadline=None)
@given(st.integers(32, 96), st.integers(32, 96))
def test_output_grids_match_anchor_grids(h, w):
    net = build_network(micro_config())
    image = np.random.default_rng(h * w).random((3, h, w))
    with E.no_grad():
        out = net.forward(image)
    anchors = net.anchors(h, w)
    for b, o in out.items():
        assert o.grid == anchors.grids[b]
        assert len(o.flat_logits()) == len(anchors.branch(b))
        assert o.flat_deltas().shape == (len(anchors.branch(b)), 4)


def test_tap_strides(net):
    assert check_tap_strides(net.cfg) == {"tap0": 4, "tap1": 8, "tap2": 16, "tap3": 32}


def test_zeroed_fmf_equals_unfused_bitwise():
    fused = build_network(micro_config())
    plain = build_network(micro_config(fmf=()))
    for k, p in plain.params.items():
        p.data = fused.params[k].data.copy()
    for k, p in fused.params.items():
        if ".fmf_proj." in k:
            p.data = np.zeros_like(p.data)
    image = np.random.default_rng(0).random((3, 45, 61))
    with E.no_grad():
        a, b = fused.forward(image), plain.forward(image)
    for br in a:
        assert np.array_equal(a[br].cls_scores.data, b[br].cls_scores.data)
        assert np.array_equal(a[br].box_deltas.data, b[br].box_deltas.data)


def test_fmf_changes_output_when_active(net):
    plain = build_network(micro_config(fmf=()))
    for k, p in plain.params.items():
        p.data = net.params[k].data
    image = np.random.default_rng(1).random((3, 32, 32))
    with E.no_grad():
        assert not np.allclose(net.forward(image)[0].cls_scores.data, plain.forward(image)[0].cls_scores.data)


def test_fmf_requires_neighbours():
    t = lambda *s: E.Tensor(np.zeros(s))
    with pytest.raises(ConfigError, match="neighboring"):
        fmf_fuse(t(2, 8, 8), t(2, 2, 2), t(2, 2, 1, 1), t(2), t(2, 2, 3, 3), t(2))


def test_fmf_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(fmf=(3,))
    with pytest.raises(ConfigError):
        build_network(micro_config(anchors=baseline_design(16, three_branch=True), fmf=(0,)))


def test_three_branch_network_has_no_m0():
    net = build_network(micro_config(anchors=baseline_design(16, three_branch=True), fmf=()))
    with E.no_grad():
        out = net.forward(np.zeros((3, 32, 32)))
    assert sorted(out) == [1, 2, 3]
    assert not any(k.startswith("branch0") for k in net.params)


def test_head_channel_counts(net):
    with E.no_grad():
        out = net.forward(np.zeros((3, 64, 64)))
    for b, o in out.items():
        a = net.cfg.anchors.num_ratios(b)
        assert o.cls_scores.shape[0] == 2 * a and o.box_deltas.shape[0] == 4 * a


def test_small_input_rejected(net):
    with pytest.raises(E.ShapeError):
        net.forward(np.zeros((3, 31, 40)))
    with pytest.raises(E.ShapeError):
        net.forward(np.zeros((1, 40, 40)))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_slot_flatten_round_trip(a, h, w):
    x = np.arange(a * 4 * h * w, dtype=float).reshape(a * 4, h, w)
    flat = flatten_slots(x, 4)
    assert flat.shape == (a * h * w, 4)
    # anchor order: cell row-major, ratio innermost
    assert flat[1 if a > 1 else 0, 0] == x[4 if a > 1 else 0, 0, 0]
    assert np.array_equal(unflatten_slots(flat, 4, h, w), x)


def test_save_load_round_trip(tmp_path, net):
    net.save(tmp_path / "m")
    back = Network.load(tmp_path / "m")
    assert back.cfg.to_dict() == net.cfg.to_dict()
    image = np.random.default_rng(2).random((3, 40, 40))
    with E.no_grad():
        a, b = net.forward(image), back.forward(image)
    for br in a:
        # weights are stored as float32
        assert np.allclose(a[br].cls_scores.data, b[br].cls_scores.data, atol=1e-5)


def test_init_is_seeded():
    a, b = build_network(micro_config()), build_network(micro_config())
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build_network(micro_config(seed=4))
    assert not np.array_equal(a.params["backbone.conv1_1.weight"].data, c.params["backbone.conv1_1.weight"].data)
