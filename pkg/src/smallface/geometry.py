"""Boxes, ellipses, overlap and non-maximum suppression.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with real-valued
coordinates and area ``(x2 - x1) * (y2 - y1)``. The array helpers at the
bottom operate on ``(N, 4)`` float arrays and are what the hot paths
(matching, inference, evaluation) call; the dataclass API wraps them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when an operation needs positive extent and gets none."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def is_degenerate(self) -> bool:
        return self.area <= 0.0

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def hflipped(self, image_width: float) -> "BoundingBox":
        return BoundingBox(image_width - self.x2, self.y1, image_width - self.x1, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Ellipse:
    """Ellipse with semi-axes ``ra >= rb > 0``; ``theta`` is the major-axis angle."""

    cx: float
    cy: float
    ra: float
    rb: float
    theta: float

    def __post_init__(self):
        if not (self.rb > 0 and self.ra >= self.rb):
            raise ValueError(f"ellipse needs ra >= rb > 0, got ra={self.ra}, rb={self.rb}")

    @classmethod
    def normalized(cls, cx: float, cy: float, ra: float, rb: float, theta: float) -> "Ellipse":
        """Build an ellipse, swapping the axes (and turning theta by pi/2) if ra < rb."""
        if ra < rb:
            ra, rb, theta = rb, ra, theta + math.pi / 2
        return cls(cx, cy, ra, rb, theta)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    branch: int = 0
    scale_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score outside [0, 1]: {self.score}")
        if self.branch not in (0, 1, 2, 3):
            raise ValueError(f"branch must be 0..3, got {self.branch}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a.is_degenerate or b.is_degenerate:
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Greedy NMS; equal scores keep their input order."""
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    keep = nms_indices(boxes, scores, threshold)
    return [dets[i] for i in keep]


def box_to_ellipse(b: BoundingBox) -> Ellipse:
    if b.is_degenerate:
        raise DegenerateGeometryError(f"degenerate geometry: {b}")
    w, h = b.width, b.height
    cx, cy = b.center
    if h >= w:
        return Ellipse(cx, cy, h / 2, w / 2, math.pi / 2)
    return Ellipse(cx, cy, w / 2, h / 2, 0.0)


def ellipse_to_box(e: Ellipse) -> BoundingBox:
    c, s = math.cos(e.theta), math.sin(e.theta)
    half_w = math.sqrt((e.ra * c) ** 2 + (e.rb * s) ** 2)
    half_h = math.sqrt((e.ra * s) ** 2 + (e.rb * c) ** 2)
    return BoundingBox(e.cx - half_w, e.cy - half_h, e.cx + half_w, e.cy + half_h)


# ---------------------------------------------------------------------------
# array helpers

def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_array() for b in boxes], dtype=np.float64)


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays; degenerate pairs give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    valid = (box_area(a)[:, None] > 0) & (box_area(b)[None, :] > 0) & (inter > 0)
    np.divide(inter, union, out=out, where=valid)
    return out


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ascending index among ties."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> list[int]:
    order = score_order(scores)
    boxes = np.asarray(boxes, dtype=np.float64)
    areas = box_area(boxes)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        ok = (inter > 0) & (areas[i] > 0) & (areas[rest] > 0)
        np.divide(inter, union, out=ov, where=ok)
        order = rest[ov <= threshold]
    return keep
