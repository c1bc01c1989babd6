"""Image resampling shared by training and inference."""

from __future__ import annotations

import numpy as np

from .engine import interpolation_matrix


def scale_factor(h: int, w: int, target_short: int, max_size: int) -> float:
    """Shortest side to ``target_short`` unless that pushes the longest side past ``max_size``."""
    return min(target_short / min(h, w), max_size / max(h, w))


def resize_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize of a ``[C, H, W]`` array by a uniform factor.

    Output size is ``round(H * factor) x round(W * factor)``; pixel centres
    map as ``x' + 0.5 = (x + 0.5) * factor`` so box coordinates scale by
    exactly ``factor``. ``factor == 1`` returns the input unchanged.
    """
    if factor == 1.0:
        return image
    _, h, w = image.shape
    oh, ow = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    ry = interpolation_matrix(h, oh, align_corners=False, scale=factor)
    rx = interpolation_matrix(w, ow, align_corners=False, scale=factor)
    return np.einsum("oh,chw,pw->cop", ry, image, rx, optimize=True)


def resize_for_scale(image: np.ndarray, target_short: int, max_size: int) -> tuple[np.ndarray, float]:
    _, h, w = image.shape
    f = scale_factor(h, w, target_short, max_size)
    return resize_image(image, f), f


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = width - boxes[:, 2]
    out[:, 2] = width - boxes[:, 0]
    return out
