"""
Independent reference implementations used to verify the fast paths.

Nothing here shares code with the functions it checks: IoU is estimated by
jittered point sampling, NMS by enumerating every subset of detections, AP
by thresholding at every score and integrating the precision envelope, and
gradients by central differences.
"""

from __future__ import annotations

import itertools
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .dataset import ImageAnnotation
from .geometry import BBoxCenter
from .postprocess import DetectionRecord


def jittered_lattice(rng: np.random.Generator, samples: int = 1_000_000):
    """Unit-square sample points, one uniform point per cell of a square lattice."""
    side = int(round(np.sqrt(samples)))
    grid = np.arange(side, dtype=np.float32)
    ux = (grid[None, :] + rng.random((side, side), dtype=np.float32)) / side
    uy = (grid[:, None] + rng.random((side, side), dtype=np.float32)) / side
    return ux, uy


def iou_monte_carlo(a, b, lattice) -> float:
    """IoU of two corner tuples by point membership.

    ``lattice`` (from :func:`jittered_lattice`) is stretched over the joint
    extent of the two boxes; IoU = points in both / points in either.
    """
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    x0, x1 = min(ax1, bx1), max(ax2, bx2)
    y0, y1 = min(ay1, by1), max(ay2, by2)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    ux, uy = lattice
    # membership tested in lattice units to avoid rescaling every point
    sx, sy = x1 - x0, y1 - y0
    in_a = (ux >= (ax1 - x0) / sx) & (ux <= (ax2 - x0) / sx) & (uy >= (ay1 - y0) / sy) & (uy <= (ay2 - y0) / sy)
    in_b = (ux >= (bx1 - x0) / sx) & (ux <= (bx2 - x0) / sx) & (uy >= (by1 - y0) / sy) & (uy <= (by2 - y0) / sy)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        up = f(x)
        x.flat[i] = orig - eps
        down = f(x)
        x.flat[i] = orig
        grad.flat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _corner(d: DetectionRecord):
    b = d.box
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def _plain_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 and inter > 0 else 0.0


def nms_bruteforce(
    dets: Sequence[DetectionRecord], iou_threshold: float, class_agnostic: bool = False
) -> List[DetectionRecord]:
    """The unique kept set K with: i in K iff no higher-ranked j in K suppresses i.

    Found by trying every subset of the detections.
    """
    n = len(dets)
    rank = sorted(range(n), key=lambda i: -dets[i].score)
    pos = {i: r for r, i in enumerate(rank)}
    corners = [_corner(d) for d in dets]
    suppresses = [[False] * n for _ in range(n)]
    for j in range(n):
        for i in range(n):
            if pos[j] < pos[i] and (class_agnostic or dets[i].class_id == dets[j].class_id):
                suppresses[j][i] = _plain_iou(corners[j], corners[i]) >= iou_threshold
    if n == 0:
        return []
    subsets = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    suppressed = subsets @ np.array(suppresses, dtype=np.int64) > 0
    fixed = np.all(subsets.astype(bool) == ~suppressed, axis=1)
    solutions = subsets[fixed]
    if len(solutions) != 1:
        raise AssertionError(f"expected a unique NMS fixed point, found {len(solutions)}")
    return [dets[i] for i in rank if solutions[0][i]]


def ap_bruteforce(scored: Sequence[Tuple[float, bool]], n_gt: int) -> float:
    """All-point AP by thresholding at each distinct score.

    Precision at recall r is the best precision of any threshold reaching
    recall >= r; that step function is integrated exactly with a midpoint
    rule over the recall breakpoints. Assumes distinct scores.
    """
    points = [(0.0, 1.0)]
    for tau in sorted({s for s, _ in scored}, reverse=True):
        kept = [hit for s, hit in scored if s >= tau]
        tp = sum(kept)
        points.append((tp / n_gt, tp / len(kept)))
    breaks = sorted({r for r, _ in points} | {0.0, 1.0})
    area = 0.0
    for lo, hi in zip(breaks, breaks[1:]):
        mid = (lo + hi) / 2
        reach = [p for r, p in points[1:] if r >= mid]
        area += (hi - lo) * (max(reach) if reach else 0.0)
    return area


# ----------------------------------------------------------------------
# Random instances
# ----------------------------------------------------------------------

def random_annotation(
    rng: np.random.Generator, S: int, C: int, max_objects: int, image_id: str = "img"
) -> ImageAnnotation:
    """Objects in distinct cells of an S x S grid, centers strictly inside."""
    n = int(rng.integers(0, min(max_objects, S * S) + 1))
    cells = rng.choice(S * S, size=n, replace=False)
    boxes = []
    for cell in cells:
        row, col = divmod(int(cell), S)
        cx = (col + rng.uniform(0.05, 0.95)) / S
        cy = (row + rng.uniform(0.05, 0.95)) / S
        w, h = rng.uniform(0.05, 0.9, size=2)
        boxes.append((int(rng.integers(C)), BBoxCenter(cx, cy, float(w), float(h))))
    return ImageAnnotation(image_id, tuple(boxes))


def random_detections(
    rng: np.random.Generator, n: int, C: int, image_id: str = "img", spread: float = 0.3
) -> List[DetectionRecord]:
    """Clustered random detections so that overlaps are common."""
    out = []
    center = rng.uniform(0.3, 0.7, size=2)
    for _ in range(n):
        cx, cy = np.clip(center + rng.normal(0, spread / 3, size=2), 0, 1)
        w, h = rng.uniform(0.05, 0.5, size=2)
        out.append(DetectionRecord(image_id, int(rng.integers(C)), float(rng.uniform(0.01, 1.0)),
                                   BBoxCenter(float(cx), float(cy), float(w), float(h))))
    return out
