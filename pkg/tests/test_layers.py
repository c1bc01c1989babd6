import pytest
from hypothesis import given
from hypothesis import strategies as st

from smallface.config import vgg_backbone
from smallface.layers import LayerSpec, conv, geometry_report, maxpool, relu


def test_vgg16_receptive_fields():
    # the full-width VGG-16 stack: rf after conv3_3 is 40, after conv5_3 is 196
    chain = []
    cin = 3
    for s, (cout, n) in enumerate(zip((64, 128, 256, 512, 512), (2, 2, 3, 3, 3)), 1):
        for i in range(1, n + 1):
            chain += [conv(f"conv{s}_{i}", cin, cout), relu(f"relu{s}_{i}")]
            cin = cout
        chain.append(maxpool(f"pool{s}"))
    rep = geometry_report(chain, (224, 224))
    assert rep["conv3_3"].receptive_field == 40 and rep["conv3_3"].stride == 4
    assert rep["conv4_3"].receptive_field == 92 and rep["conv4_3"].stride == 8
    assert rep["conv5_3"].receptive_field == 196 and rep["conv5_3"].stride == 16
    assert rep["pool5"].receptive_field == 212 and rep["pool5"].stride == 32
    assert rep["pool5"].size == (7, 7)


def test_default_backbone_taps():
    layers, taps = vgg_backbone()
    rep = geometry_report(layers, (64, 64))
    assert [rep[taps[t]].stride for t in ("tap0", "tap1", "tap2", "tap3")] == [4, 8, 16, 32]


@given(st.integers(2, 500))
def test_pool_chain_sizes_are_ceil(n):
    rep = geometry_report([maxpool(f"p{i}") for i in range(3)], (n, n))
    h = n
    for g in rep.layers:
        h = -(-h // 2)
        assert g.size == (h, h)


def test_upsample_divides_stride():
    layers = [maxpool("p1"), maxpool("p2"), LayerSpec("upsample_bilinear", stride=2, name="up")]
    rep = geometry_report(layers, (16, 16))
    assert rep["up"].stride == 2 and rep["up"].size == (8, 8)


def test_bad_layers_rejected():
    with pytest.raises(ValueError):
        LayerSpec("dropout")
    with pytest.raises(ValueError):
        LayerSpec("conv", kernel=3)
    with pytest.raises(KeyError):
        geometry_report([relu("r")], (8, 8))["missing"]


def test_table_lists_layers():
    rep = geometry_report([conv("c", 3, 4), maxpool("p")], (10, 10))
    t = rep.table()
    assert "c" in t and "5x5" in t
