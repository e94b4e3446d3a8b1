"""
Target grids for YOLO-style detectors and their inverse.

v1 layout, one row of the last axis per cell::

    [x, y, w, h, conf] * B  +  [p(c) for c in classes]

Box coordinates are stored image-relative (the same normalized cx, cy, w, h
as the labels), not relative to the owning cell. The loss is evaluated in
that same space.

v3 layout per scale is (S, S, 3, 5 + C) holding
``[tx, ty, tw, th, objectness, class targets...]`` with offsets measured
against the slot's anchor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .geometry import BBoxCenter, wh_iou_matrix
from .dataset import ImageAnnotation
from .postprocess import DetectionRecord

# v1 boxes are stored image-relative; see module docstring.
V1_COORDINATES = "image_relative"

IGNORE = -1
ANCHORS_PER_SCALE = 3
GRID_FORMAT_VERSION = 1

Anchor = Tuple[float, float]


class CellCollisionError(ValueError):
    def __init__(self, cell, message=None):
        self.cell = cell
        super().__init__(message or f"two objects fall in grid cell {cell}")


def _check_dims(**dims):
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")


def output_shape_v1(S: int, B: int, C: int) -> Tuple[int, int, int]:
    _check_dims(S=S, B=B, C=C)
    return (S, S, B * 5 + C)


def output_shape_v3(S: int, C: int) -> Tuple[int, int, int]:
    _check_dims(S=S, C=C)
    return (S, S, ANCHORS_PER_SCALE * (5 + C))


def cell_index(cx: float, cy: float, S: int) -> Tuple[int, int]:
    """(row, col) of the cell owning a center; centers at 1.0 clamp to S-1."""
    return (min(int(math.floor(cy * S)), S - 1), min(int(math.floor(cx * S)), S - 1))


# ----------------------------------------------------------------------
# YOLOv1
# ----------------------------------------------------------------------

@dataclass
class TargetGridV1:
    S: int
    B: int
    C: int
    values: np.ndarray
    responsible: np.ndarray
    dropped: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        shape = output_shape_v1(self.S, self.B, self.C)
        if self.values.shape != shape:
            raise ValueError(f"grid values have shape {self.values.shape}, expected {shape}")
        if self.responsible.shape != (self.S, self.S, self.B):
            raise ValueError("responsibility mask shape mismatch")

    def boxes(self) -> np.ndarray:
        """View of the box slots as (S, S, B, 5)."""
        return self.values[..., : self.B * 5].reshape(self.S, self.S, self.B, 5)

    def class_probs(self) -> np.ndarray:
        return self.values[..., self.B * 5:]

    @property
    def object_cells(self) -> np.ndarray:
        return self.responsible.any(axis=-1)


def encode_v1(
    annotation: ImageAnnotation, S: int, B: int, C: int, strict: bool = True
) -> TargetGridV1:
    """Place each object in the cell holding its center.

    The first box slot of an object cell carries the box and confidence 1;
    the cell's class vector is one-hot. A second object landing in an
    occupied cell raises :class:`CellCollisionError` when ``strict``,
    otherwise it is skipped and its cell recorded in ``dropped``.
    """
    values = np.zeros(output_shape_v1(S, B, C))
    responsible = np.zeros((S, S, B), dtype=bool)
    dropped = []
    for class_id, box in annotation.boxes:
        if not 0 <= class_id < C:
            raise ValueError(f"class id {class_id} outside {C} classes")
        row, col = cell_index(box.cx, box.cy, S)
        if responsible[row, col].any():
            if strict:
                raise CellCollisionError((row, col))
            dropped.append((row, col))
            continue
        values[row, col, 0:5] = (box.cx, box.cy, box.w, box.h, 1.0)
        values[row, col, B * 5 + class_id] = 1.0
        responsible[row, col, 0] = True
    return TargetGridV1(S, B, C, values, responsible, dropped)


def decode_v1(
    grid: np.ndarray,
    S: int,
    B: int,
    C: int,
    confidence_threshold: float = 0.5,
    image_id: str = "",
) -> List[DetectionRecord]:
    grid = np.asarray(grid, dtype=np.float64)
    expected = output_shape_v1(S, B, C)
    if grid.shape != expected:
        if grid.size == np.prod(expected):
            grid = grid.reshape(expected)
        else:
            raise ValueError(f"prediction grid has shape {grid.shape}, expected {expected}")
    boxes = grid[..., : B * 5].reshape(S, S, B, 5)
    probs = grid[..., B * 5:]
    out = []
    for row in range(S):
        for col in range(S):
            class_id = int(np.argmax(probs[row, col]))
            p_max = float(probs[row, col, class_id])
            for j in range(B):
                x, y, w, h, conf = boxes[row, col, j]
                if conf < confidence_threshold:
                    continue
                score = min(max(conf * p_max, 0.0), 1.0)
                box = BBoxCenter(
                    min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0), max(w, 0.0), max(h, 0.0)
                )
                out.append(DetectionRecord(image_id, class_id, score, box))
    return out


# ----------------------------------------------------------------------
# Anchor offsets
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class OffsetParams:
    tx: float
    ty: float
    tw: float
    th: float


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def offset_decode(t: OffsetParams, cell: Tuple[int, int], S: int, anchor: Anchor) -> BBoxCenter:
    pw, ph = anchor
    if pw <= 0 or ph <= 0:
        raise ValueError(f"anchor dimensions must be positive, got {anchor}")
    row, col = cell
    return BBoxCenter(
        (col + _sigmoid(t.tx)) / S,
        (row + _sigmoid(t.ty)) / S,
        pw * math.exp(t.tw),
        ph * math.exp(t.th),
    )


def offset_encode(
    box: BBoxCenter, cell: Tuple[int, int], S: int, anchor: Anchor, eps: float = 0.0
) -> OffsetParams:
    """Inverse of :func:`offset_decode`.

    The center must lie strictly inside ``cell`` unless ``eps`` > 0, in which
    case the in-cell fraction is clipped to [eps, 1 - eps] first.
    """
    pw, ph = anchor
    if pw <= 0 or ph <= 0:
        raise ValueError(f"anchor dimensions must be positive, got {anchor}")
    if box.w <= 0 or box.h <= 0:
        raise ValueError("box must have positive size to take log offsets")
    row, col = cell
    fx = box.cx * S - col
    fy = box.cy * S - row
    if eps > 0:
        fx = min(max(fx, eps), 1.0 - eps)
        fy = min(max(fy, eps), 1.0 - eps)
    elif not (0.0 < fx < 1.0 and 0.0 < fy < 1.0):
        raise ValueError(f"center ({box.cx}, {box.cy}) is not strictly inside cell {cell} of {S}")
    return OffsetParams(_logit(fx), _logit(fy), math.log(box.w / pw), math.log(box.h / ph))


# ----------------------------------------------------------------------
# YOLOv3 targets
# ----------------------------------------------------------------------

@dataclass
class TargetGridV3:
    scales: Tuple[int, ...]
    C: int
    anchors: Tuple[Tuple[Anchor, ...], ...]
    values: List[np.ndarray]
    objectness: List[np.ndarray]
    dropped: List[Tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def value_count(self) -> int:
        return sum(v.size for v in self.values)

    def count(self, state: int) -> int:
        return int(sum((o == state).sum() for o in self.objectness))


def partition_anchors(anchors: Iterable[Anchor], scales: Sequence[int]) -> Tuple[Tuple[Anchor, ...], ...]:
    """Split nine anchors into per-scale groups of three by area.

    The largest anchors go to the coarsest grid. Groups are returned in the
    order of ``scales``.
    """
    anchors = [tuple(map(float, a)) for a in anchors]
    n_scales = len(scales)
    if n_scales != 3 or len(anchors) != n_scales * ANCHORS_PER_SCALE:
        raise ValueError(
            f"need {3 * ANCHORS_PER_SCALE} anchors over 3 scales, got {len(anchors)} over {n_scales}"
        )
    by_area = sorted(anchors, key=lambda a: (a[0] * a[1], a[0]))
    tertiles = [tuple(by_area[i:i + ANCHORS_PER_SCALE]) for i in range(0, len(by_area), ANCHORS_PER_SCALE)]
    # finest grid (largest S) gets the smallest tertile
    order = sorted(range(n_scales), key=lambda k: -scales[k])
    groups: List[Tuple[Anchor, ...]] = [()] * n_scales
    for tertile, k in zip(tertiles, order):
        groups[k] = tertile
    return tuple(groups)


def encode_v3_targets(
    annotation: ImageAnnotation,
    anchors,
    scales: Sequence[int] = (13, 26, 52),
    C: int = 4,
    ignore_iou: float = 0.7,
    strict: bool = True,
) -> TargetGridV3:
    """Assign every ground-truth box to its single best-matching anchor.

    ``anchors`` is either nine (w, h) pairs, partitioned with
    :func:`partition_anchors`, or an explicit sequence of three per-scale
    groups of three. Other anchor slots in the box's cell whose shape IoU
    with the box exceeds ``ignore_iou`` are marked :data:`IGNORE` so the
    no-object term skips them.
    """
    scales = tuple(int(s) for s in scales)
    if len(scales) != 3:
        raise ValueError(f"three scales required, got {scales}")
    for s in scales:
        _check_dims(S=s)
    _check_dims(C=C)
    if not 0.0 < ignore_iou <= 1.0:
        raise ValueError(f"ignore_iou must be in (0, 1], got {ignore_iou}")
    groups = _as_groups(anchors, scales)

    values = [np.zeros((s, s, ANCHORS_PER_SCALE, 5 + C)) for s in scales]
    objectness = [np.zeros((s, s, ANCHORS_PER_SCALE), dtype=np.int8) for s in scales]
    flat = np.array([a for g in groups for a in g])
    dropped = []

    for class_id, box in annotation.boxes:
        if not 0 <= class_id < C:
            raise ValueError(f"class id {class_id} outside {C} classes")
        ious = wh_iou_matrix([[box.w, box.h]], flat)[0]
        best = int(np.argmax(ious))
        k, a = divmod(best, ANCHORS_PER_SCALE)
        row, col = cell_index(box.cx, box.cy, scales[k])
        if objectness[k][row, col, a] == 1:
            if strict:
                raise CellCollisionError(
                    (k, row, col, a), f"two objects claim anchor {a} of cell {(row, col)} at scale {scales[k]}"
                )
            dropped.append((k, row, col, a))
            continue
        t = offset_encode(box, (row, col), scales[k], groups[k][a], eps=1e-9)
        values[k][row, col, a, :5] = (t.tx, t.ty, t.tw, t.th, 1.0)
        values[k][row, col, a, 5 + class_id] = 1.0
        objectness[k][row, col, a] = 1

        for idx in np.flatnonzero(ious > ignore_iou):
            if idx == best:
                continue
            kk, aa = divmod(int(idx), ANCHORS_PER_SCALE)
            r, c = cell_index(box.cx, box.cy, scales[kk])
            if objectness[kk][r, c, aa] == 0:
                objectness[kk][r, c, aa] = IGNORE

    return TargetGridV3(scales, C, groups, values, objectness, dropped)


def _as_groups(anchors, scales) -> Tuple[Tuple[Anchor, ...], ...]:
    anchors = getattr(anchors, "anchors", anchors)
    items = list(anchors)
    if len(items) == 3 and all(
        len(g) == ANCHORS_PER_SCALE and all(len(a) == 2 for a in g) for g in items
    ):
        groups = tuple(tuple(tuple(map(float, a)) for a in g) for g in items)
    else:
        try:
            groups = partition_anchors(items, scales)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"anchor set not partitionable into 3 groups: {exc}") from None
    for g in groups:
        for w, h in g:
            if w <= 0 or h <= 0:
                raise ValueError(f"anchor dimensions must be positive, got {(w, h)}")
    return groups


# ----------------------------------------------------------------------
# Grid serialization: a JSON header line, then little-endian float32 values
# ----------------------------------------------------------------------

def grid_to_bytes(values: Union[np.ndarray, Sequence[np.ndarray]], **header) -> bytes:
    arrays = [values] if isinstance(values, np.ndarray) else list(values)
    data = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    head = {"version": GRID_FORMAT_VERSION, **header, "count": sum(a.size for a in arrays)}
    return json.dumps(head, sort_keys=True).encode("utf-8") + b"\n" + data


def grid_from_bytes(blob: bytes) -> Tuple[dict, np.ndarray]:
    """Parse a serialized grid; returns (header, flat float32 values)."""
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError("grid blob has no header line")
    header = json.loads(blob[:newline].decode("utf-8"))
    if header.get("version") != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {header.get('version')}")
    values = np.frombuffer(blob[newline + 1:], dtype="<f4")
    if values.size != header["count"]:
        raise ValueError(f"header says {header['count']} values, found {values.size}")
    return header, values


def v1_to_bytes(grid: TargetGridV1) -> bytes:
    return grid_to_bytes(grid.values, S=grid.S, B=grid.B, C=grid.C)


def v1_from_bytes(blob: bytes) -> np.ndarray:
    header, values = grid_from_bytes(blob)
    return values.astype(np.float64).reshape(output_shape_v1(header["S"], header["B"], header["C"]))


def v3_to_bytes(grid: TargetGridV3) -> bytes:
    return grid_to_bytes(grid.values, scales=list(grid.scales), B=ANCHORS_PER_SCALE, C=grid.C)


def v3_from_bytes(blob: bytes) -> List[np.ndarray]:
    header, values = grid_from_bytes(blob)
    C = header["C"]
    out, start = [], 0
    for s in header["scales"]:
        n = s * s * ANCHORS_PER_SCALE * (5 + C)
        out.append(values[start:start + n].astype(np.float64).reshape(s, s, ANCHORS_PER_SCALE, 5 + C))
        start += n
    return out
