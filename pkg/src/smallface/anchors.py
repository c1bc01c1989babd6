"""Square anchor designs, per-branch tiling and coverage analysis.

An anchor's side is ``ratio * base_size``; every anchor is square. Branch
``b`` tiles its anchors over a lattice with pitch ``strides[b]`` whose
centres sit at ``(j + 0.5) * stride``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix

STRIDES = (4, 8, 16, 32)
FOUR_BRANCH_RATIOS = ((1, 2), (4, 8), (16, 32), (64, 128))
THREE_BRANCH_RATIOS = ((1, 2), (1, 2), (4, 8), (16, 32))
MIN_IMAGE_SIDE = 32


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorDesign:
    base_size: int = 4
    ratios: tuple[tuple[int, ...], ...] = FOUR_BRANCH_RATIOS
    strides: tuple[int, ...] = STRIDES
    branches: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if self.base_size <= 0:
            raise ValueError(f"base size must be positive, got {self.base_size}")
        if len(self.ratios) != 4 or len(self.strides) != 4:
            raise ValueError("an anchor design describes exactly four branches")
        if tuple(self.strides) != STRIDES:
            raise ValueError(f"branch strides must be {STRIDES}, got {self.strides}")
        if any(r <= 0 for rs in self.ratios for r in rs):
            raise ValueError("anchor ratios must be positive")
        if not self.branches or any(b not in range(4) for b in self.branches):
            raise ValueError(f"bad branch mask {self.branches}")

    def sides(self, branch: int) -> tuple[float, ...]:
        return tuple(float(r * self.base_size) for r in self.ratios[branch])

    def all_sides(self) -> list[float]:
        return sorted(s for b in self.branches for s in self.sides(b))

    def num_ratios(self, branch: int) -> int:
        return len(self.ratios[branch])

    def with_base_size(self, bs: int) -> "AnchorDesign":
        return AnchorDesign(bs, self.ratios, self.strides, self.branches)


def sfs_design() -> AnchorDesign:
    """The small-face design: four branches, ratios 1..128, base size 4 (sides 4..512)."""
    return AnchorDesign(4, FOUR_BRANCH_RATIOS, STRIDES, (0, 1, 2, 3))


def baseline_design(bs: int, three_branch: bool = False) -> AnchorDesign:
    """The ablation designs.

    ``three_branch=False`` keeps the four-branch ratio layout at base size
    ``bs``; ``three_branch=True`` gives the three-branch layout (ratios
    {1,2}, {4,8}, {16,32} on M1..M3, no M0).
    """
    if bs <= 0:
        raise ValueError(f"base size must be positive, got {bs}")
    if bs not in (4, 8, 16):
        warnings.warn(f"base size {bs} is outside the studied grid (4, 8, 16)", stacklevel=2)
    if three_branch:
        return AnchorDesign(bs, THREE_BRANCH_RATIOS, STRIDES, (1, 2, 3))
    return AnchorDesign(bs, FOUR_BRANCH_RATIOS, STRIDES, (0, 1, 2, 3))


def grid_size(image_h: int, image_w: int, stride: int) -> tuple[int, int]:
    return (-(-image_h // stride), -(-image_w // stride))


@dataclass
class AnchorSet:
    """Tiled anchors. ``boxes`` is (N, 4); ``meta`` rows are (branch, cell_y, cell_x, ratio_index).

    Rows are grouped by branch, then row-major over cells with the ratio index innermost.
    """

    boxes: np.ndarray
    meta: np.ndarray
    image_size: tuple[int, int]
    branch_slices: dict[int, slice] = field(default_factory=dict)
    grids: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.boxes)

    def branch(self, b: int) -> np.ndarray:
        return self.boxes[self.branch_slices[b]]

    @property
    def branch_ids(self) -> np.ndarray:
        return self.meta[:, 0]


def _branch_anchors(sides: Sequence[float], stride: int, gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    cy = (np.arange(gh) + 0.5) * stride
    cx = (np.arange(gw) + 0.5) * stride
    a = len(sides)
    yy, xx, rr = np.meshgrid(np.arange(gh), np.arange(gw), np.arange(a), indexing="ij")
    yy, xx, rr = yy.ravel(), xx.ravel(), rr.ravel()
    half = np.asarray(sides, dtype=np.float64)[rr] / 2
    boxes = np.stack([cx[xx] - half, cy[yy] - half, cx[xx] + half, cy[yy] + half], axis=1)
    meta = np.stack([yy, xx, rr], axis=1)
    return boxes, meta


def tile_anchors(design: AnchorDesign, image_h: int, image_w: int) -> AnchorSet:
    if image_h < MIN_IMAGE_SIDE or image_w < MIN_IMAGE_SIDE:
        raise ImageTooSmallError(
            f"image below minimum stride coverage: {image_h}x{image_w} < {MIN_IMAGE_SIDE}")
    all_boxes, all_meta, slices, grids = [], [], {}, {}
    start = 0
    for b in design.branches:
        stride = design.strides[b]
        gh, gw = grid_size(image_h, image_w, stride)
        boxes, meta = _branch_anchors(design.sides(b), stride, gh, gw)
        all_boxes.append(boxes)
        all_meta.append(np.column_stack([np.full(len(meta), b), meta]))
        slices[b] = slice(start, start + len(boxes))
        grids[b] = (gh, gw)
        start += len(boxes)
    return AnchorSet(np.concatenate(all_boxes), np.concatenate(all_meta).astype(np.int64),
                     (image_h, image_w), slices, grids)


# ---------------------------------------------------------------------------
# coverage

@dataclass(frozen=True)
class CoverageRecord:
    face_side: float
    offset_x: float
    offset_y: float
    max_iou: float
    branch_of_argmax: int


@dataclass
class CoverageSummary:
    face_side: float
    mean: float
    min: float
    max: float


def _local_max_iou(design: AnchorDesign, faces: np.ndarray, anchor_sides: set[float] | None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Max IoU of each face against the anchors of every branch.

    Per-axis overlap of two squares only shrinks as their centres separate,
    so the best anchor of a given side sits on one of the two lattice
    points bracketing the face centre on each axis; a 4x4 neighbourhood
    around them is searched.
    """
    best = np.zeros(len(faces))
    arg = np.full(len(faces), -1)
    cx = 0.5 * (faces[:, 0] + faces[:, 2])
    cy = 0.5 * (faces[:, 1] + faces[:, 3])
    for b in design.branches:
        s = design.strides[b]
        jx = np.floor(cx / s - 0.5)
        jy = np.floor(cy / s - 0.5)
        for side in design.sides(b):
            if anchor_sides is not None and side not in anchor_sides:
                continue
            for dy in (-1, 0, 1, 2):
                for dx in (-1, 0, 1, 2):
                    ax = (jx + dx + 0.5) * s
                    ay = (jy + dy + 0.5) * s
                    anchors = np.stack([ax - side / 2, ay - side / 2, ax + side / 2, ay + side / 2], axis=1)
                    v = _paired_iou(faces, anchors)
                    better = v > best
                    best = np.where(better, v, best)
                    arg = np.where(better, b, arg)
    return best, arg


def _paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def placement_grid(step: float = 1.0, period: int = 32) -> np.ndarray:
    """Offsets covering one period of the coarsest lattice, which repeats every branch's lattice."""
    n = int(round(period / step))
    return np.arange(n) * step


def coverage_histogram(design: AnchorDesign, face_sides: Iterable[float], image_size: int = 1024,
                       step: float = 1.0, anchor_sides: Iterable[float] | None = None
                       ) -> tuple[list[CoverageRecord], list[CoverageSummary]]:
    """Max IoU between square faces and the design's anchors over a sweep of placements.

    Faces are centred at ``origin + (offset_x, offset_y)`` where ``origin`` is a
    multiple of 32 near the image centre and offsets sweep one 32-pixel period
    with the given step. ``anchor_sides`` restricts which anchors count.
    """
    origin = (image_size // 2) // 32 * 32
    offs = placement_grid(step)
    ox, oy = np.meshgrid(offs, offs, indexing="xy")
    ox, oy = ox.ravel(), oy.ravel()
    keep = None if anchor_sides is None else {float(s) for s in anchor_sides}
    records: list[CoverageRecord] = []
    summaries: list[CoverageSummary] = []
    for side in face_sides:
        side = float(side)
        cx, cy = origin + ox, origin + oy
        faces = np.stack([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2], axis=1)
        best, arg = _local_max_iou(design, faces, keep)
        records.extend(CoverageRecord(side, float(x), float(y), float(v), int(a))
                       for x, y, v, a in zip(ox, oy, best, arg))
        summaries.append(CoverageSummary(side, float(best.mean()), float(best.min()), float(best.max())))
    return records, summaries


def max_iou_brute_force(design: AnchorDesign, face: np.ndarray, image_size: int) -> float:
    anchors = tile_anchors(design, image_size, image_size)
    return float(iou_matrix(face[None], anchors.boxes).max())


def mean_coverage(design: AnchorDesign, face_sides: Iterable[float], step: float = 1.0) -> float:
    _, summaries = coverage_histogram(design, face_sides, step=step)
    return float(np.mean([s.mean for s in summaries]))


def write_coverage_csv(path, records: Sequence[CoverageRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["face_side", "offset_x", "offset_y", "max_iou", "branch_of_argmax"])
        for r in records:
            w.writerow([_fmt(r.face_side), _fmt(r.offset_x), _fmt(r.offset_y), f"{r.max_iou:.6f}",
                        r.branch_of_argmax])


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def anchor_count(design: AnchorDesign, image_h: int, image_w: int, branch: int) -> int:
    s = design.strides[branch]
    return math.ceil(image_h / s) * math.ceil(image_w / s) * design.num_ratios(branch)
