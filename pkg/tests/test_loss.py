import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salatdet.dataset import ImageAnnotation
from salatdet.encoding import encode_v1
from salatdet.geometry import BBoxCenter
from salatdet.loss import (
    IOU_WITH_TRUTH, DivergenceError, LossBreakdown, LossWeights, SingularityError,
    multilabel_class_loss, multilabel_class_loss_grad, toy_fit, yolo_v1_loss, yolo_v1_loss_grad,
)
from salatdet.oracles import central_difference, relative_error
from salatdet.selfcheck import random_loss_instance, worked_example


def scalar_terms(t, p, lam_coord=5.0):
    """Each summand of the single-cell example written out by hand."""
    x, y, w, h, c, *probs = t
    xh, yh, wh, hh, ch, *probs_h = p
    return (
        lam_coord * ((x - xh) ** 2 + (y - yh) ** 2),
        lam_coord * ((math.sqrt(w) - math.sqrt(wh)) ** 2 + (math.sqrt(h) - math.sqrt(hh)) ** 2),
        (c - ch) ** 2,
        0.0,
        sum((a - b) ** 2 for a, b in zip(probs, probs_h)),
    )


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_coord, w.lambda_noobj, w.confidence_target_mode) == (5, 0.5, "constant_one")
    with pytest.raises(ValueError):
        LossWeights(lambda_coord=-1)
    with pytest.raises(ValueError):
        LossWeights(confidence_target_mode="nope")


def test_worked_example_breakdown():
    target, pred = worked_example()
    oracle = scalar_terms(target.values.ravel(), pred.ravel())
    assert oracle == pytest.approx((0.05, 0.05, 0.04, 0.0, 0.02), abs=1e-15)
    got = yolo_v1_loss(pred, target)
    assert got.terms() == pytest.approx((0.05, 0.05, 0.04, 0.0, 0.02), abs=1e-12)
    assert got.total == pytest.approx(0.16, abs=1e-12)


def test_perfect_prediction_is_zero():
    a = ImageAnnotation("i", ((1, BBoxCenter(0.3, 0.3, 0.2, 0.4)), (3, BBoxCenter(0.8, 0.7, 0.3, 0.3))))
    target = encode_v1(a, 3, 2, 4)
    got = yolo_v1_loss(target.values.copy(), target)
    assert got == LossBreakdown(0, 0, 0, 0, 0, 0)
    g = yolo_v1_loss_grad(target.values.copy() + np.where(target.values == 0, 0, 0), target)
    assert np.count_nonzero(g) == 0


def test_empty_target_only_noobj():
    target = encode_v1(ImageAnnotation("e"), 2, 2, 4)
    pred = np.zeros(target.values.shape)
    pred[..., 4] = pred[..., 9] = 0.1
    got = yolo_v1_loss(pred, target)
    assert got.noobj_conf == pytest.approx(0.5 * 8 * 0.01, abs=1e-15)
    assert got.total == pytest.approx(0.04, abs=1e-15)
    assert got.coord_xy == got.coord_wh == got.obj_conf == got.classification == 0


def test_errors():
    target, pred = worked_example()
    with pytest.raises(ValueError):
        yolo_v1_loss(pred[..., :5], target)
    bad = pred.copy()
    bad[0, 0, 3] = -0.1
    with pytest.raises(ValueError, match="negative"):
        yolo_v1_loss(bad, target)
    bad[0, 0, 3] = 0.0
    yolo_v1_loss(bad, target)
    with pytest.raises(SingularityError):
        yolo_v1_loss_grad(bad, target)


def test_responsible_slot_is_best_iou():
    a = ImageAnnotation("i", ((0, BBoxCenter(0.5, 0.5, 0.4, 0.4)),))
    target = encode_v1(a, 1, 2, 4)
    pred = np.zeros(target.values.shape)
    pred[0, 0, 0:5] = (0.1, 0.1, 0.1, 0.1, 0.3)   # far off
    pred[0, 0, 5:10] = (0.5, 0.5, 0.4, 0.4, 0.6)  # exact
    got = yolo_v1_loss(pred, target)
    assert got.coord_xy == 0 and got.coord_wh == 0
    assert got.obj_conf == pytest.approx(0.16)
    assert got.noobj_conf == pytest.approx(0.5 * 0.09)
    # tie -> lowest index responsible
    pred[0, 0, 0:4] = pred[0, 0, 5:9]
    got = yolo_v1_loss(pred, target)
    assert got.obj_conf == pytest.approx(0.49)
    assert got.noobj_conf == pytest.approx(0.5 * 0.36)


def test_iou_confidence_mode():
    target, pred = worked_example()
    w = LossWeights(confidence_target_mode=IOU_WITH_TRUTH)
    # pred box (0.6, 0.5, 0.25, 0.16) vs truth (0.5, 0.5, 0.25, 0.25)
    inter = (0.625 - 0.475) * 0.16
    iou = inter / (0.25 * 0.16 + 0.0625 - inter)
    assert yolo_v1_loss(pred, target, w).obj_conf == pytest.approx((iou - 0.8) ** 2, abs=1e-12)
    g = yolo_v1_loss_grad(pred, target, w)
    assert g[0, 0, 4] == pytest.approx(-2 * (iou - 0.8))


def test_gradient_hand_value():
    target, pred = worked_example()
    g = yolo_v1_loss_grad(pred, target)
    assert g[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert g.shape == pred.shape
    g_at_target = yolo_v1_loss_grad(target.values.copy(), target)
    assert np.all(g_at_target == 0)


def test_gradient_finite_difference_small():
    rng = np.random.default_rng(1)
    for _ in range(10):
        S, B = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        target, pred = random_loss_instance(rng, S, B, 4)
        analytic = yolo_v1_loss_grad(pred, target)
        numeric = central_difference(lambda x: yolo_v1_loss(x, target).total, pred)
        assert relative_error(analytic, numeric) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20))
def test_lambda_coord_scaling(seed, lam):
    rng = np.random.default_rng(seed)
    target, pred = random_loss_instance(rng, int(rng.integers(1, 5)), int(rng.integers(1, 3)), 4)
    base = yolo_v1_loss(pred, target, LossWeights(lambda_coord=lam))
    doubled = yolo_v1_loss(pred, target, LossWeights(lambda_coord=2 * lam))
    assert doubled.coord_xy == 2 * base.coord_xy
    assert doubled.coord_wh == 2 * base.coord_wh
    assert (doubled.obj_conf, doubled.noobj_conf, doubled.classification) == (
        base.obj_conf, base.noobj_conf, base.classification)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_breakdown_total_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    target, pred = random_loss_instance(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)), 4)
    got = yolo_v1_loss(pred, target)
    assert all(t >= 0 for t in got.terms())
    assert abs(got.total - sum(got.terms())) <= 1e-12


def test_empty_cell_slot_permutation_invariance():
    rng = np.random.default_rng(8)
    target, pred = random_loss_instance(rng, 4, 3, 4)
    empty = ~target.object_cells
    shuffled = pred.copy()
    for r, c in np.argwhere(empty):
        slots = shuffled[r, c, :15].reshape(3, 5)
        shuffled[r, c, :15] = slots[rng.permutation(3)].ravel()
    assert yolo_v1_loss(shuffled, target) == yolo_v1_loss(pred, target)


def test_zero_iff_match_on_referenced_components():
    rng = np.random.default_rng(9)
    a = ImageAnnotation("i", ((2, BBoxCenter(0.2, 0.7, 0.3, 0.3)),))
    target = encode_v1(a, 2, 2, 4)
    pred = target.values.copy()
    # the non-responsible slot's box and the empty cells' class scores are not referenced
    pred[1, 0, 5:9] = rng.uniform(0, 1, 4)
    pred[0, 0, 10:] = rng.uniform(0, 1, 4)
    pred[0, 1, 0:4] = rng.uniform(0, 1, 4)
    assert yolo_v1_loss(pred, target).total == 0
    pred[0, 1, 4] = 1e-3
    assert yolo_v1_loss(pred, target).total > 0


def test_bce_examples():
    assert multilabel_class_loss([50.0, -50.0], [1, 0]) < 1e-9
    assert multilabel_class_loss([0.0], [1]) == pytest.approx(math.log(2), abs=1e-12)
    assert multilabel_class_loss([0.0, 0.0, 0.0], [1, 0, 1]) == pytest.approx(3 * math.log(2))
    assert math.isfinite(multilabel_class_loss([1000.0, -1000.0], [0, 1]))
    with pytest.raises(ValueError):
        multilabel_class_loss([0.0], [0.5])


def test_bce_gradient_finite_difference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.normal(0, 4, size=6)
        t = (rng.random(6) < 0.5).astype(float)
        numeric = central_difference(lambda x: multilabel_class_loss(x, t), z)
        np.testing.assert_allclose(multilabel_class_loss_grad(z, t), numeric, rtol=1e-6, atol=1e-9)


def test_toy_fit_from_target_is_flat():
    target, _ = worked_example()
    traj = toy_fit(target, target.values, 20, 0.01)
    assert len(traj) == 21 and all(b.total == 0 for b in traj)


def test_toy_fit_converges():
    target, pred = worked_example()
    traj = toy_fit(target, pred, 5000, 0.01)
    totals = [b.total for b in traj]
    assert totals[0] == pytest.approx(0.16)
    assert totals[-1] <= 0.1 * totals[0]
    assert all(b <= a for a, b in zip(totals[10:], totals[11:]))


def test_toy_fit_errors():
    target, pred = worked_example()
    with pytest.raises(DivergenceError, match="smaller"):
        toy_fit(target, pred, 100, 1e9)
    with pytest.raises(ValueError):
        toy_fit(target, pred, 0, 0.01)
    with pytest.raises(ValueError):
        toy_fit(target, pred, 10, 0.0)
