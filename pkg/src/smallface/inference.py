"""Single-scale detection and image-pyramid testing with cross-scale merging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .config import InferenceConfig, ScaleSet
from .geometry import BoundingBox, Detection, iou_matrix, nms_indices, score_order
from .imaging import resize_for_scale
from .network import Network
from .training import decode_deltas

__all__ = ["DetectionArrays", "detect_single_scale", "detect_multiscale", "resize_for_scale"]


@dataclass
class DetectionArrays:
    """Columnar detections: boxes (N, 4), scores, branches, scale ids."""

    boxes: np.ndarray
    scores: np.ndarray
    branches: np.ndarray
    scale_ids: np.ndarray

    @classmethod
    def empty(cls) -> "DetectionArrays":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "DetectionArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return DetectionArrays(self.boxes[idx], self.scores[idx], self.branches[idx], self.scale_ids[idx])

    def to_list(self) -> list[Detection]:
        return [Detection(BoundingBox(*map(float, b)), float(s), int(br), int(sc))
                for b, s, br, sc in zip(self.boxes, self.scores, self.branches, self.scale_ids)]

    @staticmethod
    def concat(parts: Sequence["DetectionArrays"]) -> "DetectionArrays":
        parts = [p for p in parts if len(p)]
        if not parts:
            return DetectionArrays.empty()
        return DetectionArrays(np.concatenate([p.boxes for p in parts]), np.concatenate([p.scores for p in parts]),
                               np.concatenate([p.branches for p in parts]),
                               np.concatenate([p.scale_ids for p in parts]))


def face_probabilities(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, best first, lower index first among ties."""
    return score_order(scores)[:k]


def nms_arrays(dets: DetectionArrays, threshold: float, box_voting: bool = False) -> DetectionArrays:
    keep = nms_indices(dets.boxes, dets.scores, threshold)
    out = dets.take(keep)
    if box_voting and len(out):
        ov = iou_matrix(out.boxes, dets.boxes)
        w = (ov >= threshold) * dets.scores[None, :]
        out.boxes = (w @ dets.boxes) / w.sum(axis=1, keepdims=True)
    return out


def detect_arrays(net: Network, image: np.ndarray, cfg: InferenceConfig, scale_id: int = 0) -> DetectionArrays:
    """Forward, score, per-branch top-K, decode, pool branches, NMS."""
    _, h, w = image.shape
    with E.no_grad():
        outputs = net.forward(image)
    anchors = net.anchors(h, w)
    parts = []
    for b, out in outputs.items():
        scores = face_probabilities(out.flat_logits())
        idx = np.flatnonzero(scores >= cfg.score_threshold)
        idx = idx[top_k(scores[idx], cfg.per_branch_topk)]
        if not len(idx):
            continue
        boxes = decode_deltas(anchors.branch(b)[idx], out.flat_deltas()[idx])
        parts.append(DetectionArrays(boxes, scores[idx], np.full(len(idx), b), np.full(len(idx), scale_id)))
    pooled = DetectionArrays.concat(parts)
    return nms_arrays(pooled, cfg.nms_threshold, cfg.box_voting)


def detect_single_scale(net: Network, image: np.ndarray, cfg: InferenceConfig | None = None) -> list[Detection]:
    return detect_arrays(net, image, cfg or InferenceConfig()).to_list()


def _one_scale(net: Network, image: np.ndarray, cfg: InferenceConfig, scale_id: int, scale: int
               ) -> DetectionArrays:
    resized, f = resize_for_scale(image, scale, cfg.scale_set.max_size)
    dets = detect_arrays(net, resized, cfg, scale_id)
    dets.boxes = dets.boxes / f
    return dets


def detect_multiscale_arrays(net: Network, image: np.ndarray, cfg: InferenceConfig) -> DetectionArrays:
    scales = cfg.scale_set.scales
    if cfg.threads > 1 and len(scales) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(lambda a: _one_scale(net, image, cfg, *a), enumerate(scales)))
    else:
        parts = [_one_scale(net, image, cfg, i, s) for i, s in enumerate(scales)]
    merged = DetectionArrays.concat(parts)
    # canonical order before the global NMS so the result ignores scale completion order
    order = np.lexsort((np.arange(len(merged)), merged.scale_ids, -merged.scores))
    return nms_arrays(merged.take(order), cfg.nms_threshold, cfg.box_voting)


def detect_multiscale(net: Network, image: np.ndarray, cfg: InferenceConfig | None = None) -> list[Detection]:
    return detect_multiscale_arrays(net, image, cfg or InferenceConfig()).to_list()


def scale_set_single(scale: int, max_size: int = 1600) -> ScaleSet:
    return ScaleSet((scale,), max_size)
