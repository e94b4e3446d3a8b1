"""
Anchor selection by k-means over box shapes with 1 - IoU as the distance.

Boxes are compared as (w, h) pairs on a shared center. Centroids move to the
coordinate-wise mean of their members. Because the mean does not minimise
the IoU distance, a cluster keeps its old centroid whenever the mean would
lower its members' summed IoU; the first update is taken unconditionally.
From that point on the mean best IoU can only go up, which the recorded
``trace`` makes checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .geometry import wh_iou_matrix


@dataclass(frozen=True)
class AnchorSet:
    anchors: Tuple[Tuple[float, float], ...]
    mean_best_iou: float
    iterations: int = 0
    trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor dimensions must be positive")

    def __len__(self) -> int:
        return len(self.anchors)

    def to_json(self, k: int, seed: int) -> dict:
        return {
            "k": k,
            "seed": seed,
            "anchors": [[w, h] for w, h in self.anchors],
            "mean_best_iou": self.mean_best_iou,
            "iterations": self.iterations,
        }


def _as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise ValueError("box dimensions must be positive and finite")
    return arr


def mean_best_iou(boxes, anchors) -> float:
    anchors = getattr(anchors, "anchors", anchors)
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(b) == 0 or len(a) == 0:
        raise ValueError("mean_best_iou needs at least one box and one anchor")
    return float(wh_iou_matrix(b, a).max(axis=1).mean())


def _seed_centroids(boxes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with d = 1 - IoU."""
    n = len(boxes)
    chosen = [int(rng.integers(n))]
    best = wh_iou_matrix(boxes, boxes[chosen]).max(axis=1)
    while len(chosen) < k:
        d2 = (1.0 - best) ** 2
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        best = np.maximum(best, wh_iou_matrix(boxes, boxes[[idx]])[:, 0])
    return boxes[chosen].copy()


def _repair_empty(boxes: np.ndarray, centroids: np.ndarray, assign: np.ndarray, fit: np.ndarray) -> bool:
    """Move empty clusters onto the worst-fit boxes. Returns True if any moved."""
    counts = np.bincount(assign, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return False
    worst = np.argsort(fit, kind="stable")
    taken = set()
    moved = False
    for j in empty:
        for i in worst:
            if i in taken:
                continue
            taken.add(int(i))
            if fit[i] < 1.0:
                centroids[j] = boxes[i]
                moved = True
            break
    return moved


def kmeans_anchors(boxes, k: int = 9, seed: int = 0, max_iter: int = 300) -> AnchorSet:
    boxes = _as_boxes(boxes)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(boxes) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(boxes)}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(boxes, k, rng)

    ious = wh_iou_matrix(boxes, centroids)
    assign = np.argmax(ious, axis=1)
    trace: List[float] = []
    iterations = 0
    for it in range(max_iter):
        iterations = it + 1
        for j in range(k):
            members = boxes[assign == j]
            if len(members) == 0:
                continue
            candidate = members.mean(axis=0)
            if it > 0:
                old = wh_iou_matrix(members, centroids[[j]]).sum()
                new = wh_iou_matrix(members, candidate[None, :]).sum()
                if new < old:
                    continue
            centroids[j] = candidate
        ious = wh_iou_matrix(boxes, centroids)
        new_assign = np.argmax(ious, axis=1)
        fit = ious[np.arange(len(boxes)), new_assign]
        if _repair_empty(boxes, centroids, new_assign, fit):
            ious = wh_iou_matrix(boxes, centroids)
            new_assign = np.argmax(ious, axis=1)
            fit = ious[np.arange(len(boxes)), new_assign]
        trace.append(float(fit.mean()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    order = sorted(range(k), key=lambda j: (centroids[j, 0] * centroids[j, 1], centroids[j, 0]))
    anchors = tuple((float(centroids[j, 0]), float(centroids[j, 1])) for j in order)
    return AnchorSet(anchors, mean_best_iou(boxes, anchors), iterations, tuple(trace))


def boxes_from_manifest(manifest) -> np.ndarray:
    """All (w, h) pairs of a manifest, skipping zero-area boxes."""
    wh = [(b.w, b.h) for ann in manifest.annotations for _, b in ann.boxes if b.w > 0 and b.h > 0]
    return np.array(wh, dtype=np.float64).reshape(-1, 2)
