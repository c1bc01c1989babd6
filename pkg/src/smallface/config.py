"""Declarative configs for the network, training and inference, with JSON I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .anchors import AnchorDesign, sfs_design
from .layers import LayerSpec, conv, maxpool, relu


class ConfigError(ValueError):
    pass


def vgg_backbone(stage_channels=(8, 16, 32, 64, 64), convs_per_stage: int = 2,
                 in_channels: int = 3) -> tuple[list[LayerSpec], dict[str, str]]:
    """VGG-shaped stack: ``convs_per_stage`` 3x3 convs + ReLU per stage, 2x2 pool after each.

    Taps are the last ReLU of stages 3, 4, 5 (strides 4, 8, 16) and the
    fifth pool (stride 32).
    """
    if len(stage_channels) != 5:
        raise ConfigError(f"a VGG-shaped backbone has 5 stages, got {len(stage_channels)}")
    layers: list[LayerSpec] = []
    cin = in_channels
    for s, cout in enumerate(stage_channels, 1):
        for i in range(1, convs_per_stage + 1):
            layers.append(conv(f"conv{s}_{i}", cin, cout))
            layers.append(relu(f"relu{s}_{i}"))
            cin = cout
        layers.append(maxpool(f"pool{s}"))
    last = f"relu{{}}_{convs_per_stage}"
    taps = {"tap0": last.format(3), "tap1": last.format(4), "tap2": last.format(5), "tap3": "pool5"}
    return layers, taps


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    convs_per_stage: int = 2
    head_channels: int = 32
    fmf: tuple[int, ...] = (0, 1)
    anchors: AnchorDesign = field(default_factory=sfs_design)
    input_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    in_channels: int = 3
    upsample: str = "align_corners"
    seed: int = 0
    backbone: list[LayerSpec] | None = None
    taps: dict[str, str] | None = None

    def __post_init__(self):
        if 3 in self.fmf:
            raise ConfigError("branch M3 has no deeper neighbour to fuse from")
        if any(b not in (0, 1, 2) for b in self.fmf):
            raise ConfigError(f"fmf entries must be branch ids 0..2, got {self.fmf}")
        if self.upsample != "align_corners":
            raise ConfigError(f"only align_corners upsampling is implemented, got {self.upsample!r}")
        if len(self.input_mean) != self.in_channels:
            raise ConfigError("input_mean needs one value per input channel")
        if self.backbone is None:
            self.backbone, default_taps = vgg_backbone(self.stage_channels, self.convs_per_stage, self.in_channels)
            if self.taps is None:
                self.taps = default_taps
        elif self.taps is None:
            raise ConfigError("an explicit backbone needs explicit taps")

    @property
    def branches(self) -> tuple[int, ...]:
        return self.anchors.branches

    def to_dict(self) -> dict[str, Any]:
        d = {
            "stage_channels": list(self.stage_channels),
            "convs_per_stage": self.convs_per_stage,
            "head_channels": self.head_channels,
            "fmf": list(self.fmf),
            "anchors": {"base_size": self.anchors.base_size,
                        "ratios": [list(r) for r in self.anchors.ratios],
                        "branches": list(self.anchors.branches)},
            "input_mean": list(self.input_mean),
            "in_channels": self.in_channels,
            "upsample": self.upsample,
            "seed": self.seed,
            "backbone": [asdict(l) for l in self.backbone],
            "taps": dict(self.taps),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        d = dict(d)
        a = d.pop("anchors", None)
        kw: dict[str, Any] = {}
        if a is not None:
            kw["anchors"] = AnchorDesign(int(a.get("base_size", 4)),
                                         tuple(tuple(r) for r in a.get("ratios", sfs_design().ratios)),
                                         branches=tuple(a.get("branches", (0, 1, 2, 3))))
        if "backbone" in d and d["backbone"] is not None:
            kw["backbone"] = [LayerSpec(**l) for l in d.pop("backbone")]
        for k in ("stage_channels", "fmf", "input_mean"):
            if k in d:
                kw[k] = tuple(d.pop(k))
        kw.update(d)
        _reject_unknown(cls, kw)
        return cls(**kw)


@dataclass
class TrainConfig:
    lr: float = 0.004
    lr_decay_factor: float = 0.1
    stepsize: int = 18000
    max_iters: int = 54000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    flip_prob: float = 0.5
    neg_per_pos: int = 3
    per_module_cap: int = 256
    zero_pos_negatives: int = 16
    ms_training_scales: tuple[int, ...] = (500, 800, 1200, 1600)
    max_size: int = 1600
    pos_iou: float = 0.45
    neg_iou: float = 0.35
    forced_match: bool = True
    reg_weight: float = 1.0
    branch_ranges: tuple[tuple[float, float], ...] | None = None
    checkpoint_every: int = 0
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "lr_decay_factor", "stepsize", "max_iters", "max_size", "per_module_cap"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.per_module_cap < 4:
            raise ConfigError("per_module_cap must be at least 4")
        if not self.ms_training_scales or min(self.ms_training_scales) <= 0:
            raise ConfigError("ms_training_scales must be non-empty and positive")
        if not (0 <= self.neg_iou <= self.pos_iou <= 1):
            raise ConfigError("need 0 <= neg_iou <= pos_iou <= 1")
        self.ms_training_scales = tuple(int(s) for s in self.ms_training_scales)
        if self.branch_ranges is not None:
            self.branch_ranges = tuple(tuple(r) for r in self.branch_ranges)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        _reject_unknown(cls, d)
        return cls(**d)


FOUR_SCALE = (500, 800, 1200, 1600)
WIDE_SCALE = (500, 600, 700, 800, 900, 1000, 1100, 1200, 1600)


@dataclass
class ScaleSet:
    scales: tuple[int, ...] = (1200,)
    max_size: int = 1600

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError("scales must be positive")
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError(f"scales must be strictly ascending, got {self.scales}")
        if self.max_size <= 0:
            raise ConfigError("max_size must be positive")

    @classmethod
    def preset(cls, name: str, max_size: int = 1600) -> "ScaleSet":
        presets = {"four_scale": FOUR_SCALE, "four": FOUR_SCALE, "wide_scale": WIDE_SCALE, "wide": WIDE_SCALE}
        if name in presets:
            return cls(presets[name], max_size)
        try:
            return cls(tuple(sorted(int(s) for s in name.split(","))), max_size)
        except ValueError:
            raise ConfigError(f"unknown scale preset {name!r}; use four, wide or a comma list") from None


@dataclass
class InferenceConfig:
    per_branch_topk: int = 1000
    nms_threshold: float = 0.3
    score_threshold: float = 0.05
    scale_set: ScaleSet = field(default_factory=ScaleSet)
    box_voting: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.per_branch_topk < 1:
            raise ConfigError("per_branch_topk must be >= 1")
        if not (0 < self.nms_threshold < 1):
            raise ConfigError("nms_threshold must lie in (0, 1)")
        if not (0 <= self.score_threshold < 1):
            raise ConfigError("score_threshold must lie in [0, 1)")


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def _reject_unknown(cls, d: dict) -> None:
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")


def load_json(path) -> dict[str, Any]:
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None


def dump_json(obj: dict[str, Any], path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
