"""
YOLOv1 sum-squared loss, its analytic gradient, and the YOLOv3 multi-label
classification loss.

Predictions are raw grids laid out like :class:`~salatdet.encoding.TargetGridV1`
values, so the loss is a pure function of two arrays and can be checked
against finite differences to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, astuple
from typing import List, Tuple

import numpy as np

from .encoding import TargetGridV1

CONSTANT_ONE = "constant_one"
IOU_WITH_TRUTH = "iou_with_truth"
SQRT_EPS = 1e-12
DIVERGENCE_LIMIT = 1e6
MIN_PROJECTED_SIZE = 1e-6


class SingularityError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    confidence_target_mode: str = CONSTANT_ONE

    def __post_init__(self):
        if self.lambda_coord < 0 or self.lambda_noobj < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.confidence_target_mode not in (CONSTANT_ONE, IOU_WITH_TRUTH):
            raise ValueError(f"unknown confidence target mode {self.confidence_target_mode!r}")


@dataclass(frozen=True)
class LossBreakdown:
    coord_xy: float
    coord_wh: float
    obj_conf: float
    noobj_conf: float
    classification: float
    total: float

    @classmethod
    def from_terms(cls, *terms: float) -> "LossBreakdown":
        return cls(*terms, total=float(sum(terms)))

    def terms(self) -> Tuple[float, float, float, float, float]:
        return astuple(self)[:5]


def _pair_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of (..., 4) center boxes; negative sizes count as 0."""
    aw, ah = np.clip(a[..., 2], 0, None), np.clip(a[..., 3], 0, None)
    bw, bh = np.clip(b[..., 2], 0, None), np.clip(b[..., 3], 0, None)
    iw = np.minimum(a[..., 0] + aw / 2, b[..., 0] + bw / 2) - np.maximum(a[..., 0] - aw / 2, b[..., 0] - bw / 2)
    ih = np.minimum(a[..., 1] + ah / 2, b[..., 1] + bh / 2) - np.maximum(a[..., 1] - ah / 2, b[..., 1] - bh / 2)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = aw * ah + bw * bh - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


@dataclass
class _Assignment:
    pred_boxes: np.ndarray     # (S, S, B, 5)
    pred_probs: np.ndarray     # (S, S, C)
    truth_box: np.ndarray      # (S, S, 4), meaningful on object cells only
    truth_probs: np.ndarray    # (S, S, C)
    obj_cell: np.ndarray       # (S, S) bool
    resp: np.ndarray           # (S, S, B) bool, responsible predicted slots
    conf_target: np.ndarray    # (S, S) confidence target on object cells


def _assign(pred: np.ndarray, target: TargetGridV1, weights: LossWeights) -> _Assignment:
    S, B = target.S, target.B
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.values.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.values.shape}")
    pred_boxes = pred[..., : B * 5].reshape(S, S, B, 5)
    obj_cell = target.object_cells
    # truth box of a cell = the box in its target's responsible slot
    first = np.argmax(target.responsible, axis=-1)
    truth_box = np.take_along_axis(target.boxes(), first[..., None, None], axis=2)[:, :, 0, :4]

    ious = _pair_iou(pred_boxes[..., :4], truth_box[:, :, None, :])
    best = np.argmax(ious, axis=-1)  # first maximum -> lowest slot index on ties
    resp = np.zeros((S, S, B), dtype=bool)
    np.put_along_axis(resp, best[..., None], True, axis=-1)
    resp &= obj_cell[..., None]

    if weights.confidence_target_mode == IOU_WITH_TRUTH:
        conf_target = np.take_along_axis(ious, best[..., None], axis=-1)[..., 0]
    else:
        conf_target = np.ones((S, S))
    return _Assignment(pred_boxes, pred[..., B * 5:], truth_box, target.class_probs(),
                       obj_cell, resp, conf_target)


def _responsible_wh(a: _Assignment) -> np.ndarray:
    wh = a.pred_boxes[..., 2:4][a.resp]
    if np.any(wh < 0):
        raise ValueError("negative predicted width or height in a responsible slot")
    return wh


def yolo_v1_loss(pred: np.ndarray, target: TargetGridV1, weights: LossWeights = LossWeights()) -> LossBreakdown:
    a = _assign(pred, target, weights)
    cells = a.resp.any(axis=-1)
    resp_box = a.pred_boxes[a.resp]                  # (n_obj, 5), row-major cell order
    truth = a.truth_box[cells]
    pred_wh = _responsible_wh(a)

    coord_xy = weights.lambda_coord * np.sum((truth[:, :2] - resp_box[:, :2]) ** 2)
    coord_wh = weights.lambda_coord * np.sum((np.sqrt(truth[:, 2:4]) - np.sqrt(pred_wh)) ** 2)
    obj_conf = np.sum((a.conf_target[cells] - resp_box[:, 4]) ** 2)
    noobj_conf = weights.lambda_noobj * np.sum(a.pred_boxes[..., 4][~a.resp] ** 2)
    classification = np.sum((a.truth_probs[a.obj_cell] - a.pred_probs[a.obj_cell]) ** 2)
    return LossBreakdown.from_terms(
        float(coord_xy), float(coord_wh), float(obj_conf), float(noobj_conf), float(classification)
    )


def yolo_v1_loss_grad(pred: np.ndarray, target: TargetGridV1, weights: LossWeights = LossWeights()) -> np.ndarray:
    """d(total loss)/d(pred), same shape as ``pred``.

    In ``iou_with_truth`` mode the confidence target is treated as a
    constant, as detector training does; the result is then not the full
    derivative of the non-smooth objective.
    """
    a = _assign(pred, target, weights)
    pred_wh = _responsible_wh(a)
    if np.any(pred_wh <= SQRT_EPS):
        raise SingularityError(
            f"responsible width/height <= {SQRT_EPS}; the square-root term has no derivative there"
        )
    S, B = target.S, target.B
    g_boxes = np.zeros_like(a.pred_boxes)
    cells = a.resp.any(axis=-1)
    truth = a.truth_box[cells]
    resp_box = a.pred_boxes[a.resp]

    g = np.zeros_like(resp_box)
    g[:, :2] = -2.0 * weights.lambda_coord * (truth[:, :2] - resp_box[:, :2])
    sq = np.sqrt(pred_wh)
    g[:, 2:4] = -weights.lambda_coord * (np.sqrt(truth[:, 2:4]) - sq) / sq
    g[:, 4] = -2.0 * (a.conf_target[cells] - resp_box[:, 4])
    g_boxes[a.resp] = g

    noobj = ~a.resp
    g_boxes[..., 4][noobj] = 2.0 * weights.lambda_noobj * a.pred_boxes[..., 4][noobj]

    g_probs = np.zeros_like(a.pred_probs)
    g_probs[a.obj_cell] = -2.0 * (a.truth_probs[a.obj_cell] - a.pred_probs[a.obj_cell])
    return np.concatenate([g_boxes.reshape(S, S, B * 5), g_probs], axis=-1)


# ----------------------------------------------------------------------
# YOLOv3 multi-label classification
# ----------------------------------------------------------------------

def multilabel_class_loss(pred_logits, target) -> float:
    """Sum over classes of binary cross-entropy on logistic outputs.

    Uses BCE(sigmoid(z), t) = max(z, 0) - z*t + log(1 + exp(-|z|)).
    """
    z = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError("logits and targets differ in shape")
    if np.any((t != 0) & (t != 1)):
        raise ValueError("multi-hot targets must be 0 or 1")
    return float(np.sum(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))


def multilabel_class_loss_grad(pred_logits, target) -> np.ndarray:
    z = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    # sigmoid(z) - t, evaluated without overflow
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return sig - t


# ----------------------------------------------------------------------
# Gradient descent demo
# ----------------------------------------------------------------------

def _project(pred: np.ndarray, B: int) -> np.ndarray:
    S = pred.shape[0]
    boxes = pred[..., : B * 5].reshape(S, S, B, 5)
    np.maximum(boxes[..., 2:4], MIN_PROJECTED_SIZE, out=boxes[..., 2:4])
    return pred


def toy_fit(
    target: TargetGridV1,
    initial_pred: np.ndarray,
    steps: int,
    learning_rate: float,
    weights: LossWeights = LossWeights(),
) -> List[LossBreakdown]:
    """Plain gradient descent on raw prediction values.

    Returns the breakdown at the start and after every step (``steps + 1``
    entries). Widths and heights are projected back to >= 1e-6 after each
    update.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    pred = _project(np.array(initial_pred, dtype=np.float64), target.B)
    trajectory = [yolo_v1_loss(pred, target, weights)]
    for step in range(1, steps + 1):
        if trajectory[-1].total == 0.0:
            trajectory.append(trajectory[-1])
            continue
        pred -= learning_rate * yolo_v1_loss_grad(pred, target, weights)
        _project(pred, target.B)
        current = yolo_v1_loss(pred, target, weights)
        if not np.isfinite(current.total) or current.total > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"loss reached {current.total:.3g} at step {step}; try a smaller learning rate"
            )
        trajectory.append(current)
    return trajectory

