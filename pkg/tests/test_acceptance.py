"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from conftest import TEST_COUNTS, TEST_IMAGES, TRAIN_COUNTS, TRAIN_IMAGES, write_perfect_detections
from salatdet import cli
from salatdet.anchors import kmeans_anchors
from salatdet.dataset import ImageAnnotation, save_manifest
from salatdet.encoding import decode_v1, encode_v1, encode_v3_targets
from salatdet.evaluation import VOC, average_precision, match_detections
from salatdet.geometry import BBoxCenter, BBoxCorner, iou
from salatdet.loss import LossWeights, toy_fit, yolo_v1_loss, yolo_v1_loss_grad
from salatdet.oracles import (
    ap_bruteforce, central_difference, iou_monte_carlo, jittered_lattice, nms_bruteforce,
    random_annotation, random_detections, relative_error,
)
from salatdet.postprocess import DetectionRecord, nms
from salatdet.selfcheck import WORKED_BREAKDOWN, random_loss_instance, worked_example

RESULTS = {}


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def random_corner(rng, lo=0.0, hi=1.0):
    x = np.sort(rng.uniform(lo, hi, 2))
    y = np.sort(rng.uniform(lo, hi, 2))
    return BBoxCorner(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def test_criterion_01_iou_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_mc = worst_sym = worst_scale = 0.0
    lattice = None
    for k in range(1000):
        if k % 50 == 0:
            lattice = jittered_lattice(rng, 1_000_000)
        a = random_corner(rng)
        # half of the pairs are forced to overlap so the oracle sees nontrivial IoUs
        b = random_corner(rng, *sorted((a.x1, a.x2))) if k % 2 else random_corner(rng)
        got = iou(a, b)
        worst_mc = max(worst_mc, abs(got - iou_monte_carlo(a.as_tuple(), b.as_tuple(), lattice)))
        worst_sym = max(worst_sym, abs(got - iou(b, a)))
        s = float(rng.uniform(0.1, 1.0))
        scaled = [BBoxCorner(*(s * v for v in box.as_tuple())) for box in (a, b)]
        worst_scale = max(worst_scale, abs(got - iou(*scaled)))
    elapsed = time.perf_counter() - start
    ok = worst_mc <= 1e-3 and worst_sym <= 1e-12 and worst_scale <= 1e-12 and elapsed < 30
    report(1, ok, f"MC dev {worst_mc:.2e}, symmetry {worst_sym:.1e}, scale {worst_scale:.1e}, {elapsed:.1f}s")


def test_criterion_02_loss_and_gradient():
    start = time.perf_counter()
    target, pred = worked_example()
    got = yolo_v1_loss(pred, target)
    values = got.terms() + (got.total,)
    exact = all(abs(a - b) <= 1e-12 for a, b in zip(values, WORKED_BREAKDOWN))
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        S, B = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        tgt, p = random_loss_instance(rng, S, B, 4)
        analytic = yolo_v1_loss_grad(p, tgt)
        numeric = central_difference(lambda x: yolo_v1_loss(x, tgt).total, p, eps=1e-5)
        worst = max(worst, relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = exact and worst < 1e-4 and elapsed < 60
    report(2, ok, f"breakdown {tuple(round(v, 12) for v in values)}, FD rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_03_lambda_sensitivity():
    rng = np.random.default_rng(103)
    bad = 0
    for _ in range(20):
        S, B = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        tgt, p = random_loss_instance(rng, S, B, 4)
        lam = float(rng.uniform(0.5, 10))
        base = yolo_v1_loss(p, tgt, LossWeights(lambda_coord=lam))
        dbl = yolo_v1_loss(p, tgt, LossWeights(lambda_coord=2 * lam))
        same = (dbl.obj_conf, dbl.noobj_conf, dbl.classification) == (
            base.obj_conf, base.noobj_conf, base.classification)
        bad += not (dbl.coord_xy == 2 * base.coord_xy and dbl.coord_wh == 2 * base.coord_wh and same)
    report(3, bad == 0, f"20 instances, {bad} violations")


def test_criterion_04_roundtrip():
    rng = np.random.default_rng(104)
    bad_v1 = 0
    for k in range(500):
        S, B = int(rng.integers(1, 14)), int(rng.integers(1, 4))
        ann = random_annotation(rng, S, 4, max_objects=10, image_id=f"r{k}")
        dets = decode_v1(encode_v1(ann, S, B, 4).values, S, B, 4, 0.5, ann.image_id)
        got = sorted((d.class_id,) + d.box.as_tuple() for d in dets)
        want = sorted((c,) + b.as_tuple() for c, b in ann.boxes)
        bad_v1 += len(got) != len(want) or any(
            g[0] != w[0] or max(abs(x - y) for x, y in zip(g[1:], w[1:])) > 1e-9
            for g, w in zip(got, want))
    bad_v3 = 0
    for _ in range(200):
        anchors = rng.uniform(0.01, 0.95, size=(9, 2))
        ann = random_annotation(rng, 13, 4, max_objects=8)
        grid = encode_v3_targets(ann, anchors, (13, 26, 52), 4, 0.7)
        bad_v3 += grid.count(1) != len(ann.boxes)
    report(4, bad_v1 == 0 and bad_v3 == 0, f"v1 500 cases {bad_v1} mismatches, v3 200 configs {bad_v3} mismatches")


def test_criterion_05_toy_minimization():
    start = time.perf_counter()
    target, pred = worked_example()
    totals = [b.total for b in toy_fit(target, pred, 5000, 0.01)]
    elapsed = time.perf_counter() - start
    reduction = 1 - totals[-1] / totals[0]
    monotone = all(b <= a for a, b in zip(totals[10:], totals[11:]))
    ok = reduction >= 0.9 and monotone and elapsed < 10
    report(5, ok, f"loss {totals[0]:.4g} -> {totals[-1]:.3g} ({reduction:.1%}), monotone {monotone}, {elapsed:.1f}s")


def _ap_instance(rng):
    n_gt, n_det = int(rng.integers(1, 5)), int(rng.integers(0, 7))
    gts = ImageAnnotation("i", tuple(
        (0, BBoxCenter(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))) for _ in range(n_gt)))
    scores = rng.permutation(n_det) / 10.0 + 0.05
    dets = []
    for s in scores:
        if n_gt and rng.random() < 0.7:
            _, b = gts.boxes[int(rng.integers(n_gt))]
            jitter = rng.normal(0, 0.03, 4)
            box = BBoxCenter(float(np.clip(b.cx + jitter[0], 0, 1)), float(np.clip(b.cy + jitter[1], 0, 1)),
                             abs(b.w + jitter[2]), abs(b.h + jitter[3]))
        else:
            box = BBoxCenter(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))
        dets.append(DetectionRecord("i", 0, float(s), box))
    return gts, dets


def test_criterion_06_ap_oracle():
    rng = np.random.default_rng(106)
    worst = 0.0
    conservation = monotone = True
    for _ in range(500):
        gts, dets = _ap_instance(rng)
        aps = []
        for t in (0.5, 0.6, 0.7, 0.8, 0.9):
            out = match_detections(dets, gts, t, VOC)
            conservation &= out.tp + out.fn == len(gts.boxes)
            scored = [(m.detection.score, m.verdict == "TP") for m in out.detections]
            ap = average_precision(scored, len(gts.boxes))
            worst = max(worst, abs(ap - ap_bruteforce(scored, len(gts.boxes))))
            aps.append(ap)
        monotone &= all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))
    worked = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
    ok = worst <= 1e-9 and abs(worked - 5 / 6) <= 1e-12 and conservation and monotone
    report(6, ok, f"500 instances max dev {worst:.1e}, worked {worked:.6f}, "
                  f"TP+FN=|GT| {conservation}, monotone {monotone}")


def test_criterion_07_nms_equivalence():
    rng = np.random.default_rng(107)
    bad = 0
    for _ in range(1000):
        dets = random_detections(rng, int(rng.integers(0, 11)), 3)
        thr = float(rng.uniform(0.1, 0.9))
        agnostic = bool(rng.integers(2))
        bad += nms(dets, thr, agnostic) != nms_bruteforce(dets, thr, agnostic)
    report(7, bad == 0, f"1000 instances, {bad} mismatches")


def test_criterion_08_anchor_clustering():
    rng = np.random.default_rng(108)
    monotone = True
    for run in range(50):
        k = int(rng.integers(1, 10))
        boxes = rng.uniform(0.01, 1, size=(int(rng.integers(k, 200)), 2))
        trace = kmeans_anchors(boxes, k, seed=run).trace
        monotone &= all(b >= a for a, b in zip(trace, trace[1:]))
    groups = kmeans_anchors([[0.1, 0.1]] * 5 + [[0.5, 0.5]] * 5, k=2, seed=0)
    recovered = groups.anchors == ((0.1, 0.1), (0.5, 0.5)) and groups.mean_best_iou == 1.0
    distinct = rng.uniform(0.01, 1, size=(12, 2))
    full = kmeans_anchors(distinct, k=12, seed=3).mean_best_iou
    ok = monotone and recovered and full == pytest.approx(1.0, abs=1e-12)
    report(8, ok, f"traces monotone {monotone}, groups {groups.anchors}, k=N -> {full:.12f}")


def test_criterion_09_protocol(tmp_path, published_train, published_test, capsys):
    printed = []
    for name, manifest in (("train", published_train), ("test", published_test)):
        save_manifest(manifest, tmp_path / f"{name}.json")
        cli.main(["stats", "--manifest", str(tmp_path / f"{name}.json")])
        lines = capsys.readouterr().out.splitlines()
        printed.append((int(lines[0].split()[-1]), tuple(int(x.split()[-1]) for x in lines[1:5])))
    stats_ok = printed == [(TRAIN_IMAGES, TRAIN_COUNTS), (TEST_IMAGES, TEST_COUNTS)]

    dets = write_perfect_detections(published_test, tmp_path / "dets.jsonl")
    code = cli.main(["eval", "--manifest", str(tmp_path / "test.json"), "--detections", str(dets),
                     "--out", str(tmp_path / "eval"), "--no-figures"])
    capsys.readouterr()
    rows = (tmp_path / "eval" / "map.csv").read_text().splitlines()
    expected = ["iou,mAP,average_iou"] + [f"{t},1,1" for t in ("0.5", "0.6", "0.7", "0.8", "0.9")]
    header = (tmp_path / "eval" / "report.csv").read_text().splitlines()[0]
    ok = stats_ok and code == 0 and rows == expected and header == "class,iou,AP,TP,FP,FN,mode"
    report(9, ok, f"stats {printed}, eval map.csv {rows[1:]}")


def test_criterion_10_determinism(tmp_path, published_test, capsys):
    save_manifest(published_test, tmp_path / "m.json")
    rng = np.random.default_rng(110)
    with open(tmp_path / "d.jsonl", "w") as fh:
        for ann in published_test.annotations:
            for c, b in ann.boxes:
                fh.write(json.dumps({"image_id": ann.image_id, "class_id": int(rng.integers(4)),
                                     "score": float(rng.random()), "cx": b.cx, "cy": b.cy,
                                     "w": b.w * rng.uniform(0.8, 1.2), "h": b.h}) + "\n")
    outputs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        cli.main(["eval", "--manifest", str(tmp_path / "m.json"), "--detections", str(tmp_path / "d.jsonl"),
                  "--out", str(out), "--no-figures"])
        cli.main(["anchors", "--manifest", str(tmp_path / "m.json"), "--k", "9", "--seed", "5",
                  "--out", str(out)])
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    capsys.readouterr()
    names = sorted(outputs[0])
    ok = len(names) >= 5 and outputs[0] == outputs[1]
    report(10, ok, f"{len(names)} files byte-identical across runs: {', '.join(names)}")
