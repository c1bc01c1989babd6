"""Desk-scale experiment on seeded synthetic scenes, shared by scripts and tests."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .anchors import baseline_design, sfs_design
from .config import InferenceConfig, NetworkConfig, ScaleSet, TrainConfig
from .dataio import Scene, SyntheticSceneSpec, generate_synthetic
from .evaluation import SUBSETS, EvalRecord, average_precision
from .inference import detect_multiscale_arrays
from .network import Network, build_network
from .training import TrainSample, train

VARIANTS = ("sfa", "baseline")


@dataclass
class ToyConfig:
    variant: str = "sfa"
    train_count: int = 200
    test_count: int = 50
    train_seed: int = 11
    test_seed: int = 12
    canvas: int = 256
    min_side: int = 6
    max_side: int = 200
    steps: int = 2500
    lr: float = 0.003
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def scene_spec(cfg: ToyConfig, seed: int) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(height=cfg.canvas, width=cfg.canvas, min_side=cfg.min_side, max_side=cfg.max_side,
                              max_overlap_iou=0.0, seed=seed)


def toy_scenes(cfg: ToyConfig) -> tuple[list[Scene], list[Scene]]:
    train_set = generate_synthetic(scene_spec(cfg, cfg.train_seed), cfg.train_count, "train")
    test_set = generate_synthetic(scene_spec(cfg, cfg.test_seed), cfg.test_count, "test")
    return train_set, test_set


def network_config(variant: str, seed: int = 0) -> NetworkConfig:
    """``sfa``: four branches, small-face anchors, M0/M1 fused. ``baseline``: three branches at base size 16."""
    if variant == "sfa":
        return NetworkConfig(anchors=sfs_design(), fmf=(0, 1), seed=seed)
    if variant == "baseline":
        return NetworkConfig(anchors=baseline_design(16, three_branch=True), fmf=(), seed=seed)
    raise ValueError(f"unknown variant {variant!r}")


def train_config(cfg: ToyConfig) -> TrainConfig:
    # one decay step at 3/4 of the budget; training at the canvas' native size
    return TrainConfig(lr=cfg.lr, stepsize=max(1, int(cfg.steps * 0.75)), max_iters=cfg.steps,
                       ms_training_scales=(cfg.canvas,), max_size=cfg.canvas, seed=cfg.seed)


def inference_config(cfg: ToyConfig) -> InferenceConfig:
    return InferenceConfig(scale_set=ScaleSet((cfg.canvas,), cfg.canvas))


def evaluate(net: Network, scenes: list[Scene], icfg: InferenceConfig) -> dict[str, float]:
    records = []
    for s in scenes:
        d = detect_multiscale_arrays(net, s.image, icfg)
        records.append(EvalRecord(s.name, d.boxes, d.scores, s.boxes, list(s.tags)))
    out = {"overall": average_precision(records).ap}
    for sub in SUBSETS:
        out[sub] = average_precision(records, sub).ap
    return out


def run_toy(cfg: ToyConfig, out_dir=None, progress=None) -> tuple[Network, dict]:
    """Train one variant on the synthetic training scenes and score it on the held-out ones."""
    train_set, test_set = toy_scenes(cfg)
    net = build_network(network_config(cfg.variant, cfg.seed))
    samples = [TrainSample(s.image, s.boxes, name=s.name) for s in train_set]
    t0 = time.perf_counter()
    train(net, samples, train_config(cfg), out_dir, progress=progress)
    t_train = time.perf_counter() - t0
    ap = evaluate(net, test_set, inference_config(cfg))
    result = {"variant": cfg.variant, "steps": cfg.steps, "train_seconds": t_train, "ap": ap}
    return net, result


def load_or_train(cfg: ToyConfig, cache_dir, progress=None, name: str | None = None) -> tuple[Network, dict]:
    """``run_toy`` with the trained weights cached under ``cache_dir/<name or variant>``."""
    d = Path(cache_dir) / (name or cfg.variant)
    res = d / "result.json"
    if res.exists() and (d / "final.manifest").exists():
        result = json.loads(res.read_text())
        if result.get("config") == _plain(cfg):
            return Network.load(d / "final"), result
    net, result = run_toy(cfg, d, progress)
    result["config"] = _plain(cfg)
    res.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return net, result


def _plain(cfg: ToyConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def plant_face(canvas: int, side: int, seed: int = 0, background: float = 0.2,
               intensity: float = 0.85, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """A single square face of ``side`` px centred on an otherwise empty noisy canvas."""
    rng = np.random.default_rng(seed)
    img = background + noise * rng.standard_normal((canvas, canvas))
    x1 = y1 = (canvas - side) // 2
    img[y1:y1 + side, x1:x1 + side] = intensity + noise * rng.standard_normal((side, side))
    img = np.clip(np.round(img * 255), 0, 255) / 255.0
    return np.repeat(img[None], 3, axis=0), np.array([[x1, y1, x1 + side, y1 + side]], dtype=np.float64)


def large_face_config() -> ToyConfig:
    """SFA model that never sees a face under 14 px, so tiny faces are only reachable by upscaling."""
    return ToyConfig(variant="sfa", min_side=14, steps=1500)


def with_steps(cfg: ToyConfig, steps: int) -> ToyConfig:
    return replace(cfg, steps=steps)
