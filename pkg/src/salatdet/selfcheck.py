"""Built-in verification battery behind ``salatdet selfcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import oracles
from .encoding import (
    TargetGridV1, decode_v1, encode_v1, encode_v3_targets,
    offset_decode, offset_encode,
)
from .evaluation import average_precision
from .geometry import BBoxCenter
from .loss import LossWeights, multilabel_class_loss, yolo_v1_loss, yolo_v1_loss_grad
from .postprocess import nms

# single-cell example: S=1, B=1, C=2
WORKED_TARGET = (0.5, 0.5, 0.25, 0.25, 1.0, 1.0, 0.0)
WORKED_PRED = (0.6, 0.5, 0.25, 0.16, 0.8, 0.9, 0.1)
WORKED_BREAKDOWN = (0.05, 0.05, 0.04, 0.0, 0.02, 0.16)
WORKED_DX = 1.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def worked_example():
    """(target grid, prediction array) of the single-cell loss example."""
    values = np.array(WORKED_TARGET, dtype=np.float64).reshape(1, 1, 7)
    responsible = np.ones((1, 1, 1), dtype=bool)
    target = TargetGridV1(1, 1, 2, values, responsible)
    return target, np.array(WORKED_PRED, dtype=np.float64).reshape(1, 1, 7)


def random_loss_instance(rng: np.random.Generator, S: int, B: int, C: int):
    ann = oracles.random_annotation(rng, S, C, max_objects=S * S)
    target = encode_v1(ann, S, B, C)
    pred = rng.uniform(0.0, 1.0, size=target.values.shape)
    boxes = pred[..., : B * 5].reshape(S, S, B, 5)
    boxes[..., 2:4] = rng.uniform(0.05, 1.0, size=boxes[..., 2:4].shape)
    return target, pred


def check_loss_worked_example(weights: LossWeights) -> CheckResult:
    target, pred = worked_example()
    got = yolo_v1_loss(pred, target, weights)
    values = got.terms() + (got.total,)
    ok = all(abs(a - b) <= 1e-12 for a, b in zip(values, WORKED_BREAKDOWN))
    return CheckResult("loss_worked_example", ok,
                       "terms " + ", ".join(f"{v:.6g}" for v in values))


def check_gradient(weights: LossWeights, instances: int = 20, seed: int = 7) -> CheckResult:
    target, pred = worked_example()
    dx = yolo_v1_loss_grad(pred, target, weights)[0, 0, 0]
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        S, B = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        tgt, p = random_loss_instance(rng, S, B, 4)
        analytic = yolo_v1_loss_grad(p, tgt, weights)
        numeric = oracles.central_difference(lambda x: yolo_v1_loss(x, tgt, weights).total, p)
        worst = max(worst, oracles.relative_error(analytic, numeric))
    ok = abs(dx - WORKED_DX) <= 1e-12 and worst < 1e-4
    return CheckResult("gradient_finite_difference", ok,
                       f"d/dx worked example {dx:.6g}, max rel err {worst:.2e} over {instances} grids")


def check_roundtrip(instances: int = 100, seed: int = 11) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        S, B = int(rng.integers(1, 8)), int(rng.integers(1, 3))
        ann = oracles.random_annotation(rng, S, 4, max_objects=6)
        dets = decode_v1(encode_v1(ann, S, B, 4).values, S, B, 4, 0.5)
        got = sorted((d.class_id,) + d.box.as_tuple() for d in dets)
        want = sorted((c,) + b.as_tuple() for c, b in ann.boxes)
        if len(got) != len(want) or any(
            g[0] != w[0] or max(abs(x - y) for x, y in zip(g[1:], w[1:])) > 1e-9
            for g, w in zip(got, want)
        ):
            bad += 1
    for _ in range(instances):
        S = int(rng.integers(1, 14))
        row, col = int(rng.integers(S)), int(rng.integers(S))
        box = BBoxCenter((col + rng.uniform(0.01, 0.99)) / S, (row + rng.uniform(0.01, 0.99)) / S,
                         rng.uniform(0.01, 1), rng.uniform(0.01, 1))
        anchor = tuple(rng.uniform(0.01, 1, size=2))
        back = offset_decode(offset_encode(box, (row, col), S, anchor), (row, col), S, anchor)
        if max(abs(x - y) for x, y in zip(back.as_tuple(), box.as_tuple())) > 1e-9:
            bad += 1
    for _ in range(instances):
        ann = oracles.random_annotation(rng, 13, 4, max_objects=8)
        anchors = rng.uniform(0.02, 0.9, size=(9, 2))
        grid = encode_v3_targets(ann, anchors, (13, 26, 52), 4, 0.7)
        if grid.count(1) != len(ann.boxes):
            bad += 1
    return CheckResult("encode_decode_roundtrip", bad == 0, f"{3 * instances} cases, {bad} mismatches")


def check_nms(instances: int = 200, seed: int = 13) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        dets = oracles.random_detections(rng, int(rng.integers(1, 9)), 3)
        thr = float(rng.uniform(0.1, 0.9))
        agnostic = bool(rng.integers(2))
        if nms(dets, thr, agnostic) != oracles.nms_bruteforce(dets, thr, agnostic):
            bad += 1
    return CheckResult("nms_bruteforce_equivalence", bad == 0, f"{instances} instances, {bad} mismatches")


def check_ap(instances: int = 200, seed: int = 17) -> CheckResult:
    worked = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n_gt = int(rng.integers(1, 5))
        n_det = int(rng.integers(0, 7))
        hits = rng.permutation(n_det) < min(n_gt, n_det)
        hits &= rng.random(n_det) < 0.7
        scored = list(zip(rng.permutation(n_det) / 10.0 + 0.05, hits.tolist()))
        worst = max(worst, abs(average_precision(scored, n_gt) - oracles.ap_bruteforce(scored, n_gt)))
    ok = abs(worked - 5.0 / 6.0) <= 1e-12 and worst <= 1e-9
    return CheckResult("ap_oracle", ok, f"worked case {worked:.6f}, max deviation {worst:.1e}")


def check_bce() -> CheckResult:
    half = multilabel_class_loss([0.0], [1.0])
    sat = multilabel_class_loss([50.0, -50.0], [1.0, 0.0])
    ok = abs(half - math.log(2)) <= 1e-12 and sat < 1e-9
    return CheckResult("multilabel_bce", ok, f"logit 0 -> {half:.6f}, saturated -> {sat:.1e}")


def run_selfcheck(weights: LossWeights = LossWeights()) -> List[CheckResult]:
    checks: List[Callable[[], CheckResult]] = [
        lambda: check_loss_worked_example(weights),
        lambda: check_gradient(weights),
        check_roundtrip,
        check_nms,
        check_ap,
        check_bce,
    ]
    results = []
    for check in checks:
        try:
            results.append(check())
        except Exception as exc:  # a crashing check is a failing check
            name = getattr(check, "__name__", "check")
            results.append(CheckResult(name, False, f"raised {type(exc).__name__}: {exc}"))
    return results
