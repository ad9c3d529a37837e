"""Box arithmetic shared by mining, refinement, detection and evaluation."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .exceptions import GeometryError
from .models import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with half-open integer areas."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / float(a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([box.as_tuple() for box in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of half-open boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def clip_box(box: tuple[int, int, int, int], width: int, height: int) -> BoundingBox | None:
    """Clip raw coordinates to the image; ``None`` when nothing of the box remains."""
    x1 = min(max(int(box[0]), 0), width)
    y1 = min(max(int(box[1]), 0), height)
    x2 = min(max(int(box[2]), 0), width)
    y2 = min(max(int(box[3]), 0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2, y2)


def expand_box(box: BoundingBox, fraction: float, width: int, height: int) -> BoundingBox:
    """Grow each side by ``fraction`` of the box's dimension, clipped to the image."""
    dx = int(round(fraction * box.width))
    dy = int(round(fraction * box.height))
    expanded = clip_box((box.x1 - dx, box.y1 - dy, box.x2 + dx, box.y2 + dy), width, height)
    if expanded is None:
        raise GeometryError(f"Box {box.as_tuple()} lies outside a {width}x{height} image")
    return expanded


def map_box_to_grid(
    box: BoundingBox, width: int, height: int, grid_width: int, grid_height: int
) -> tuple[int, int, int, int]:
    """
    Map an image-space box onto a feature grid of ``grid_width`` x ``grid_height`` cells.

    Leading edges round down and trailing edges round up, then everything is clipped. The
    result may be empty (``x1 == x2`` or ``y1 == y2``) only for boxes outside the image.
    """
    sx = grid_width / float(width)
    sy = grid_height / float(height)
    x1 = min(max(math.floor(box.x1 * sx), 0), grid_width)
    y1 = min(max(math.floor(box.y1 * sy), 0), grid_height)
    x2 = min(max(math.ceil(box.x2 * sx), 0), grid_width)
    y2 = min(max(math.ceil(box.y2 * sy), 0), grid_height)
    return x1, y1, max(x1, x2), max(y1, y2)


def tight_box(mask: np.ndarray) -> BoundingBox | None:
    """Smallest box covering every nonzero pixel of a 2-D mask."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
