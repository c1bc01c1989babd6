"""The four-branch detector graph.

A VGG-shaped backbone exposes four taps at strides 4, 8, 16 and 32. Each
enabled branch runs a head: a 3x3 conv + ReLU followed by parallel 1x1 convs
for face/background logits (``2 * A`` channels) and box deltas (``4 * A``).
On a fused branch the head's 3x3 conv sees ``tap_i + proj(up(tap_{i+1}))``
instead of ``tap_i`` alone, so zeroing the projection recovers the unfused
branch exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import engine as E
from .anchors import STRIDES, AnchorSet, tile_anchors
from .config import ConfigError, NetworkConfig
from .engine import Tensor
from .layers import geometry_report
from .weights import load_weights, save_weights

TAP_STRIDES = {"tap0": 4, "tap1": 8, "tap2": 16, "tap3": 32}


@dataclass
class BranchOutput:
    cls_scores: Tensor
    box_deltas: Tensor
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.cls_scores.shape[1], self.cls_scores.shape[2]

    def flat_logits(self) -> np.ndarray:
        """(N, 2) background/face logits in anchor order (row-major cells, ratio innermost)."""
        return flatten_slots(self.cls_scores.data, 2)

    def flat_deltas(self) -> np.ndarray:
        return flatten_slots(self.box_deltas.data, 4)


def flatten_slots(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    a = c // k
    return x.reshape(a, k, h, w).transpose(2, 3, 0, 1).reshape(-1, k)


def unflatten_slots(flat: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    a = flat.shape[0] // (h * w)
    return flat.reshape(h, w, a, k).transpose(2, 3, 0, 1).reshape(a * k, h, w)


def fmf_fuse(low: Tensor, high: Tensor, proj_w: Tensor, proj_b: Tensor, conv_w: Tensor, conv_b: Tensor) -> Tensor:
    """``conv3x3(low + proj1x1(upsample(high, size of low)))``.

    ``high`` must come from the next-deeper tap, i.e. its grid is the
    ceil-halved grid of ``low``.
    """
    _, h, w = low.shape
    if high.shape[1:] != (-(-h // 2), -(-w // 2)):
        raise ConfigError(f"FMF requires neighboring branches: low {low.shape} vs high {high.shape}")
    up = E.upsample_bilinear(high, h, w)
    fused = E.add(low, E.conv2d(up, proj_w, proj_b))
    return E.conv2d(fused, conv_w, conv_b, stride=1, padding=conv_w.shape[2] // 2)


class Network:
    def __init__(self, cfg: NetworkConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.tap_channels = _tap_channels(cfg)

    # -- construction -------------------------------------------------------

    @property
    def branches(self) -> tuple[int, ...]:
        return self.cfg.branches

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"weights missing for {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"weight {k} has shape {state[k].shape}, expected {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    # -- forward ------------------------------------------------------------

    def normalize(self, image: np.ndarray) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise E.ShapeError(f"expected a [{self.cfg.in_channels}, H, W] image, got {image.shape}")
        mean = np.asarray(self.cfg.input_mean)[:, None, None]
        return Tensor(image - mean)

    def backbone(self, x: Tensor) -> dict[str, Tensor]:
        inv = {v: k for k, v in self.cfg.taps.items()}
        taps: dict[str, Tensor] = {}
        for layer in self.cfg.backbone:
            if layer.kind == "conv":
                x = E.conv2d(x, self.params[f"backbone.{layer.name}.weight"],
                             self.params[f"backbone.{layer.name}.bias"], layer.stride, layer.padding)
            elif layer.kind == "relu":
                x = E.relu(x)
            elif layer.kind == "maxpool":
                x = E.maxpool2d(x, layer.kernel, layer.stride)
            else:
                raise ConfigError(f"backbone layer kind {layer.kind!r} is not supported")
            if layer.name in inv:
                taps[inv[layer.name]] = x
        return taps

    def branch_head(self, b: int, taps: dict[str, Tensor]) -> BranchOutput:
        p = self.params
        low = taps[f"tap{b}"]
        cw, cb = p[f"branch{b}.head_conv.weight"], p[f"branch{b}.head_conv.bias"]
        if b in self.cfg.fmf:
            h = fmf_fuse(low, taps[f"tap{b + 1}"], p[f"branch{b}.fmf_proj.weight"],
                         p[f"branch{b}.fmf_proj.bias"], cw, cb)
        else:
            h = E.conv2d(low, cw, cb, 1, cw.shape[2] // 2)
        h = E.relu(h)
        cls = E.conv2d(h, p[f"branch{b}.cls.weight"], p[f"branch{b}.cls.bias"])
        reg = E.conv2d(h, p[f"branch{b}.reg.weight"], p[f"branch{b}.reg.bias"])
        return BranchOutput(cls, reg, STRIDES[b])

    def forward(self, image: np.ndarray) -> dict[int, BranchOutput]:
        """One pass over the shared backbone, then every enabled head."""
        _, H, W = np.shape(image)
        if H < 32 or W < 32:
            raise E.ShapeError(f"input {H}x{W} is below the 32x32 minimum")
        taps = self.backbone(self.normalize(image))
        return {b: self.branch_head(b, taps) for b in self.branches}

    __call__ = forward

    def anchors(self, image_h: int, image_w: int) -> AnchorSet:
        return tile_anchors(self.cfg.anchors, image_h, image_w)

    # -- persistence ----------------------------------------------------------

    def save(self, stem) -> None:
        meta = {
            "upsample": self.cfg.upsample,
            "input_mean": ",".join(repr(float(m)) for m in self.cfg.input_mean),
            "network": json.dumps(self.cfg.to_dict(), sort_keys=True, separators=(",", ":")),
        }
        save_weights(stem, self.state(), meta)

    @classmethod
    def load(cls, stem) -> "Network":
        state, meta = load_weights(stem)
        if "network" not in meta:
            raise ConfigError(f"{stem}: weight manifest carries no network config")
        cfg = NetworkConfig.from_dict(json.loads(meta["network"]))
        net = build_network(cfg)
        net.load_state(state)
        return net


def _tap_channels(cfg: NetworkConfig) -> dict[str, int]:
    channels, c = {}, cfg.in_channels
    inv = {v: k for k, v in cfg.taps.items()}
    for layer in cfg.backbone:
        if layer.kind == "conv":
            c = layer.out_channels
        if layer.name in inv:
            channels[inv[layer.name]] = c
    return channels


def check_tap_strides(cfg: NetworkConfig, probe: int = 64) -> dict[str, int]:
    report = geometry_report(cfg.backbone, (probe, probe))
    strides = {}
    for tap, stride in TAP_STRIDES.items():
        if tap not in cfg.taps:
            raise ConfigError(f"backbone has no layer mapped to {tap}")
        try:
            got = report[cfg.taps[tap]].stride
        except KeyError:
            raise ConfigError(f"{tap} names unknown layer {cfg.taps[tap]!r}") from None
        if got != stride:
            raise ConfigError(f"{tap} ({cfg.taps[tap]}) has stride {got}, expected {stride}")
        strides[tap] = got
    return strides


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], gain: float) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


def build_network(cfg: NetworkConfig) -> Network:
    check_tap_strides(cfg)
    stray = [b for b in cfg.fmf if b not in cfg.branches]
    if stray:
        raise ConfigError(f"fmf names branches {stray} that are not enabled ({cfg.branches})")
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}

    def add_conv(name, shape, gain):
        params[f"{name}.weight"] = E.parameter(_kaiming(rng, shape, gain), f"{name}.weight")
        params[f"{name}.bias"] = E.parameter(np.zeros(shape[0]), f"{name}.bias")

    cin = cfg.in_channels
    for layer in cfg.backbone:
        if layer.kind == "conv":
            if layer.in_channels != cin:
                raise ConfigError(f"{layer.name} expects {layer.in_channels} input channels, gets {cin}")
            add_conv(f"backbone.{layer.name}", layer.weight_shape, np.sqrt(2.0))
            cin = layer.out_channels
    chans = _tap_channels(cfg)
    hc = cfg.head_channels
    for b in cfg.branches:
        c = chans[f"tap{b}"]
        a = cfg.anchors.num_ratios(b)
        if b in cfg.fmf:
            add_conv(f"branch{b}.fmf_proj", (c, chans[f"tap{b + 1}"], 1, 1), 1.0)
        add_conv(f"branch{b}.head_conv", (hc, c, 3, 3), np.sqrt(2.0))
        add_conv(f"branch{b}.cls", (2 * a, hc, 1, 1), 1.0)
        add_conv(f"branch{b}.reg", (4 * a, hc, 1, 1), 1.0)
    return Network(cfg, params)
