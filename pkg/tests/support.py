"""Small fixtures shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from oracles import finite_diff, rel_err
from smallface import engine as E
from smallface.config import NetworkConfig, TrainConfig
from smallface.network import build_network
from smallface.training import match_anchors, multitask_loss


def micro_config(**kw) -> NetworkConfig:
    base = dict(stage_channels=(4, 4, 8, 8, 8), convs_per_stage=1, head_channels=8, seed=3)
    base.update(kw)
    return NetworkConfig(**base)


def micro_problem(seed: int = 0, size: int = 32):
    """A micro network, an image with biases perturbed off zero and a few gt faces."""
    net = build_network(micro_config())
    rng = np.random.default_rng(seed)
    for k, p in net.params.items():
        if k.endswith(".bias"):
            p.data = rng.normal(0.0, 0.1, p.shape)
    image = rng.random((3, size, size))
    gts = np.array([[3.0, 4.0, 9.0, 11.0], [12.0, 10.0, 28.0, 27.0], [1.0, 18.0, 6.0, 24.0]])
    return net, image, gts


def op_gradient_errors(build, *arrays, eps: float = 1e-5) -> list[float]:
    """Max relative error of ``d sum(probe * build(*xs)) / d x`` against central differences, per input."""
    rng = np.random.default_rng(7)
    tensors = [E.parameter(a) for a in arrays]
    out = build(*tensors)
    probe = rng.standard_normal(out.shape)
    E.weighted_sum(out, probe).backward()

    def f():
        with E.no_grad():
            return float((build(*[E.Tensor(a) for a in arrays]).data * probe).sum())

    return [float(rel_err(t.grad, finite_diff(f, a, eps)).max()) for t, a in zip(tensors, arrays)]


def loss_value(net, image, gts, cfg: TrainConfig):
    out = net.forward(image)
    _, h, w = image.shape
    anchors = net.anchors(h, w)
    a = match_anchors(anchors, gts, cfg.pos_iou, cfg.neg_iou, cfg.forced_match)
    return multitask_loss(out, anchors, a, cfg)


def loss_gradient_errors(net, image, gts, cfg: TrainConfig, names=None, eps: float = 1e-6):
    """Max elementwise relative error between backprop and central differences, per parameter."""
    E.zero_grads(net.parameters())
    loss, _ = loss_value(net, image, gts, cfg)
    loss.backward()

    def f():
        with E.no_grad():
            return float(loss_value(net, image, gts, cfg)[0].data)

    errs = {}
    for name, p in net.params.items():
        if names is not None and name not in names:
            continue
        num = finite_diff(f, p.data, eps)
        errs[name] = float(rel_err(p.grad, num, floor=1e-4).max())
    return errs
