"""Anchor matching, OHEM, the multi-branch loss and the SGD training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import engine as E
from .anchors import AnchorSet
from .config import TrainConfig
from .geometry import BoundingBox, boxes_to_array, iou_matrix
from .imaging import hflip, hflip_boxes, resize_image, scale_factor
from .network import BranchOutput, Network, unflatten_slots

log = logging.getLogger(__name__)

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class GroundTruthFace:
    box: BoundingBox
    difficulty: str | None = None

    def __post_init__(self):
        if self.box.is_degenerate:
            raise ValueError(f"ground-truth face must have positive area: {self.box}")


# ---------------------------------------------------------------------------
# box encoding

def encode_deltas(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Centre-offset / log-size deltas of ``gts`` relative to ``anchors`` (both (N, 4))."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    w, h = gts[:, 2] - gts[:, 0], gts[:, 3] - gts[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise ValueError("cannot encode against a degenerate anchor")
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError("cannot encode a degenerate ground-truth box")
    cxa, cya = anchors[:, 0] + 0.5 * wa, anchors[:, 1] + 0.5 * ha
    cx, cy = gts[:, 0] + 0.5 * w, gts[:, 1] + 0.5 * h
    return np.stack([(cx - cxa) / wa, (cy - cya) / ha, np.log(w / wa), np.log(h / ha)], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    cxa, cya = anchors[:, 0] + 0.5 * wa, anchors[:, 1] + 0.5 * ha
    cx, cy = cxa + deltas[:, 0] * wa, cya + deltas[:, 1] * ha
    # exp overflow guard; log(1000) is far beyond any face/anchor size ratio in use
    w = wa * np.exp(np.minimum(deltas[:, 2], np.log(1000.0)))
    h = ha * np.exp(np.minimum(deltas[:, 3], np.log(1000.0)))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor: BoundingBox, gt: BoundingBox) -> tuple[float, float, float, float]:
    return tuple(encode_deltas(anchor.as_array(), gt.as_array())[0])


def decode_box(anchor: BoundingBox, deltas: Sequence[float]) -> BoundingBox:
    return BoundingBox(*decode_deltas(anchor.as_array(), np.asarray(deltas))[0])


# ---------------------------------------------------------------------------
# matching

@dataclass
class MatchAssignment:
    """Per-anchor labels: ``>= 0`` is the matched gt index, ``NEGATIVE`` or ``IGNORE`` otherwise."""

    labels: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray
    forced: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(anchors: AnchorSet | np.ndarray, gts: Sequence[GroundTruthFace] | np.ndarray,
                  pos_iou: float = 0.45, neg_iou: float = 0.35, forced_match: bool = True,
                  ignore_boxes: np.ndarray | None = None,
                  branch_ranges: Sequence[tuple[float, float]] | None = None) -> MatchAssignment:
    """Threshold assignment plus a forced best match for every gt left without a positive.

    Anchors with IoU > ``pos_iou`` to some gt are positives for their best
    gt; anchors whose IoU is < ``neg_iou`` against every gt are negatives;
    the rest are ignored. A gt with no positive then claims its highest-IoU
    anchor (lowest index among ties) that is not already positive for
    another gt, provided that IoU is > 0. Anchors overlapping an ignore box
    by at least ``neg_iou`` are never negatives.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    g = gts if isinstance(gts, np.ndarray) else boxes_to_array([f.box for f in gts])
    g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    targets = np.zeros((n, 4))
    forced = np.zeros(n, dtype=bool)
    if len(g) == 0:
        return MatchAssignment(labels, targets, np.zeros(n), forced)
    ious = iou_matrix(boxes, g)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[best >= neg_iou] = IGNORE
    pos = best > pos_iou
    labels[pos] = best_gt[pos]
    if branch_ranges is not None and isinstance(anchors, AnchorSet):
        sides = np.maximum(g[:, 2] - g[:, 0], g[:, 3] - g[:, 1])
        for b, (lo, hi) in enumerate(branch_ranges):
            if b not in anchors.branch_slices:
                continue
            sl = anchors.branch_slices[b]
            lab = labels[sl]
            out = (lab >= 0) & ((sides[np.maximum(lab, 0)] < lo) | (sides[np.maximum(lab, 0)] > hi))
            lab[out] = IGNORE
    if forced_match:
        for j in range(len(g)):
            if np.any(labels == j):
                continue
            col = np.where(labels >= 0, -1.0, ious[:, j])
            i = int(col.argmax())
            if col[i] > 0:
                labels[i] = j
                forced[i] = True
    if ignore_boxes is not None and len(ignore_boxes):
        ig = iou_matrix(boxes, ignore_boxes).max(axis=1)
        labels[(labels == NEGATIVE) & (ig >= neg_iou)] = IGNORE
    p = np.flatnonzero(labels >= 0)
    if len(p):
        targets[p] = encode_deltas(boxes[p], g[labels[p]])
    return MatchAssignment(labels, targets, best, forced)


# ---------------------------------------------------------------------------
# losses

def smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def anchor_losses(logits: np.ndarray, deltas: np.ndarray, assignment_labels: np.ndarray,
                  targets: np.ndarray, reg_weight: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor cross-entropy and (positives only) summed smooth-L1."""
    y = (assignment_labels >= 0).astype(np.int64)
    ce = -log_softmax2(logits)[np.arange(len(y)), y]
    reg = np.zeros(len(y))
    p = y == 1
    reg[p] = reg_weight * smooth_l1(deltas[p] - targets[p]).sum(axis=1)
    return ce, reg


def _top_by_loss(idx: np.ndarray, loss: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` entries of ``idx`` with highest loss, lower index first among ties."""
    if k <= 0 or len(idx) == 0:
        return idx[:0]
    order = np.lexsort((idx, -loss[idx]))
    return idx[order[:k]]


def ohem_select(labels: np.ndarray, losses: np.ndarray, cap: int = 256, neg_per_pos: int = 3,
                zero_pos_negatives: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Hard-example selection for one branch: returns (positive, negative) anchor indices.

    Positives: the hardest ``min(#pos, cap // (1 + neg_per_pos))``. Negatives:
    the hardest ``neg_per_pos`` per kept positive, total capped at ``cap``;
    with no positives, ``min(cap, zero_pos_negatives)`` hardest negatives.
    Ignored anchors are never selected.
    """
    pos = np.flatnonzero(labels >= 0)
    neg = np.flatnonzero(labels == NEGATIVE)
    keep_pos = _top_by_loss(pos, losses, min(len(pos), cap // (1 + neg_per_pos)))
    if len(keep_pos) == 0:
        n_neg = min(cap, zero_pos_negatives)
    else:
        n_neg = min(neg_per_pos * len(keep_pos), cap - len(keep_pos))
    return keep_pos, _top_by_loss(neg, losses, n_neg)


@dataclass
class BranchLoss:
    cls: float = 0.0
    reg: float = 0.0
    num_pos: int = 0
    num_neg: int = 0


def multitask_loss(outputs: dict[int, BranchOutput], anchors: AnchorSet, assignment: MatchAssignment,
                   cfg: TrainConfig | None = None) -> tuple[E.Tensor, dict[int, BranchLoss]]:
    """Sum over branches of mean CE over OHEM-selected anchors + weighted mean smooth-L1 over positives."""
    cfg = cfg or TrainConfig()
    total = 0.0
    parents, grads, breakdown = [], [], {}
    for b, out in outputs.items():
        sl = anchors.branch_slices[b]
        logits, deltas = out.flat_logits(), out.flat_deltas()
        labels, targets = assignment.labels[sl], assignment.targets[sl]
        ce, reg = anchor_losses(logits, deltas, labels, targets, cfg.reg_weight)
        pos, neg = ohem_select(labels, ce + reg, cfg.per_module_cap, cfg.neg_per_pos, cfg.zero_pos_negatives)
        sel = np.concatenate([pos, neg])
        g_logits = np.zeros_like(logits)
        g_deltas = np.zeros_like(deltas)
        bl = BranchLoss(num_pos=len(pos), num_neg=len(neg))
        if len(sel):
            y = (labels[sel] >= 0).astype(np.int64)
            prob = np.exp(log_softmax2(logits[sel]))
            bl.cls = float(ce[sel].mean())
            onehot = np.zeros_like(prob)
            onehot[np.arange(len(sel)), y] = 1.0
            g_logits[sel] = (prob - onehot) / len(sel)
        if len(pos):
            d = deltas[pos] - targets[pos]
            bl.reg = float(cfg.reg_weight * smooth_l1(d).sum(axis=1).mean())
            g_deltas[pos] = cfg.reg_weight * smooth_l1_grad(d) / len(pos)
        h, w = out.grid
        parents += [out.cls_scores, out.box_deltas]
        grads += [unflatten_slots(g_logits, 2, h, w), unflatten_slots(g_deltas, 4, h, w)]
        total += bl.cls + bl.reg
        breakdown[b] = bl
    return E.custom_scalar(total, parents, grads, op="multitask_loss"), breakdown


# ---------------------------------------------------------------------------
# optimisation

def learning_rate(cfg: TrainConfig, it: int) -> float:
    """Step schedule ``lr * decay ** (it // stepsize)``, evaluated in decimal and rounded once."""
    k = it // cfg.stepsize
    return float(Decimal(repr(cfg.lr)) * Decimal(repr(cfg.lr_decay_factor)) ** k)


class SGD:
    """Momentum SGD with L2 weight decay: ``v = mu*v - lr*(g + wd*w); w += v``."""

    def __init__(self, params: Iterable[E.Tensor], momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v -= lr * (g + self.weight_decay * p.data)
            p.data += v

    def zero_grad(self) -> None:
        E.zero_grads(self.params)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainSample:
    image: np.ndarray
    boxes: np.ndarray
    ignore: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    name: str = ""


def augment(sample: TrainSample, cfg: TrainConfig, rng: np.random.Generator
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
    """Random training scale (shortest side, capped by max_size) and random horizontal flip."""
    scale = int(rng.choice(np.asarray(cfg.ms_training_scales)))
    flip = bool(rng.random() < cfg.flip_prob)
    _, h, w = sample.image.shape
    f = scale_factor(h, w, scale, cfg.max_size)
    image = resize_image(sample.image, f)
    boxes, ignore = sample.boxes * f, sample.ignore * f
    if flip:
        width = image.shape[2]
        image = hflip(image)
        boxes = hflip_boxes(boxes, width)
        ignore = hflip_boxes(ignore, width)
    return image, boxes, ignore, scale, flip


class Trainer:
    def __init__(self, net: Network, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
        self._anchor_cache: dict[tuple[int, int], AnchorSet] = {}

    def anchors(self, h: int, w: int) -> AnchorSet:
        key = (h, w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = self.net.anchors(h, w)
        return self._anchor_cache[key]

    def step(self, sample: TrainSample, it: int) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, it])
        image, boxes, ignore, scale, flip = augment(sample, cfg, rng)
        lr = learning_rate(cfg, it)
        record = {"iter": it, "image": sample.name, "scale": scale, "flip": flip, "lr": lr}
        _, h, w = image.shape
        if h < 32 or w < 32:
            log.warning("skipping %s at iter %d: resized to %dx%d", sample.name, it, h, w)
            record["skipped"] = f"image {h}x{w} below 32x32"
            return record
        outputs = self.net.forward(image)
        anchors = self.anchors(h, w)
        assignment = match_anchors(anchors, boxes, cfg.pos_iou, cfg.neg_iou, cfg.forced_match,
                                   ignore_boxes=ignore, branch_ranges=cfg.branch_ranges)
        loss, parts = multitask_loss(outputs, anchors, assignment, cfg)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step(lr)
        record["loss"] = float(loss.data)
        for b, bl in parts.items():
            record[f"cls{b}"] = bl.cls
            record[f"reg{b}"] = bl.reg
            record[f"pos{b}"] = bl.num_pos
        return record


def epoch_order(n: int, seed: int, iters: int) -> list[int]:
    """Sample indices for ``iters`` steps: one seeded permutation per pass over the data."""
    order: list[int] = []
    epoch = 0
    while len(order) < iters:
        order.extend(np.random.default_rng([seed, 1_000_003, epoch]).permutation(n).tolist())
        epoch += 1
    return order[:iters]


def train(net: Network, samples: Sequence[TrainSample], cfg: TrainConfig, out_dir=None,
          iters: int | None = None, progress=None, start_iter: int = 0) -> list[dict]:
    """Run iterations ``start_iter .. iters - 1`` (default end ``cfg.max_iters``).

    Logs JSON lines and checkpoints under ``out_dir``. A resumed run
    (``start_iter > 0``) appends to the log and restarts momentum from zero.
    """
    iters = cfg.max_iters if iters is None else iters
    if not 0 <= start_iter <= iters:
        raise ValueError(f"start_iter {start_iter} outside [0, {iters}]")
    if not samples:
        raise ValueError("no training samples")
    trainer = Trainer(net, cfg)
    order = epoch_order(len(samples), cfg.seed, iters)
    records = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if start_iter else "w")
    try:
        for it in range(start_iter, iters):
            rec = trainer.step(samples[order[it]], it)
            records.append(rec)
            if log_fh and (it % cfg.log_every == 0 or it == iters - 1):
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                net.save(out_dir / f"ckpt_{it + 1:06d}")
            if progress is not None:
                progress(rec)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        net.save(out_dir / "final")
    return records
