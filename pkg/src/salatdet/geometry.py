"""
Bounding box representations and overlap arithmetic.

All coordinates are normalized to the image: x runs left to right over
[0, 1] of the image width, y top to bottom over [0, 1] of the height.
Two forms are used throughout the package:

    BBoxCenter  (cx, cy, w, h)   darknet label convention
    BBoxCorner  (x1, y1, x2, y2) top-left / bottom-right corners
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class BBoxCenter:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size ({self.w}, {self.h})")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class BBoxCorner:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted corner box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def center_to_corner(b: BBoxCenter) -> BBoxCorner:
    hw, hh = b.w / 2.0, b.h / 2.0
    return BBoxCorner(b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)


def corner_to_center(b: BBoxCorner) -> BBoxCenter:
    return BBoxCenter(
        (b.x1 + b.x2) / 2.0,
        (b.y1 + b.y2) / 2.0,
        b.x2 - b.x1,
        b.y2 - b.y1,
    )


def iou(a: BBoxCorner, b: BBoxCorner) -> float:
    """Intersection over union of two corner boxes.

    Returns 0.0 for disjoint boxes and for the degenerate case where the
    union has zero area, so evaluation never sees NaN.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def wh_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (w, h) shapes placed on a common center."""
    aw, ah = a
    bw, bh = b
    inter = min(aw, bw) * min(ah, bh)
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


# ----------------------------------------------------------------------
# Vectorized forms, used by matching, NMS and clustering
# ----------------------------------------------------------------------

def centers_to_corners(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) cx, cy, w, h -> (N, 4) x1, y1, x2, y2."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2.0
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def wh_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise co-centered IoU between (N, 2) and (M, 2) shape arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
    union = (a[:, 0] * a[:, 1])[:, None] + (b[:, 0] * b[:, 1])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
