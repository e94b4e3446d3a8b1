"""
Command-line entry point.

    salatdet stats        --manifest M [--classes classes.txt] [--out DIR]
    salatdet split        --manifest M --train-fraction 0.9 --seed 0 --out DIR
    salatdet anchors      --manifest M --k 9 --seed 0 [--out DIR]
    salatdet eval         --manifest M --detections D.jsonl [--iou T ...] --out DIR
    salatdet encode-check --manifest M [--grid 7 --boxes 2] [--out DIR]
    salatdet selfcheck

Exit codes: 0 success, 1 a check or verification failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import boxes_from_manifest, kmeans_anchors
from .dataset import (
    LabelParseError, ManifestError, dataset_stats, load_manifest, save_manifest, split_dataset,
)
from .encoding import CellCollisionError, cell_index, decode_v1, encode_v1, v1_from_bytes, v1_to_bytes
from .evaluation import (
    ALL_POINT, DEFAULT_IOU_THRESHOLDS, ELEVEN_POINT, PAPER, VOC, evaluate, latency_stats,
)
from .postprocess import read_detections

log = logging.getLogger("salatdet")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT = 0, 1, 2

MODES = {"voc": VOC, "paper": PAPER}
INTERPOLATIONS = {"allpoint": ALL_POINT, "11pt": ELEVEN_POINT}


class InputError(Exception):
    pass


def fmt(x) -> str:
    """Stable 6-significant-digit rendering for CSV cells."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6g")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    path = Path(args.manifest)
    if not path.is_file():
        raise InputError(f"cannot read manifest {path}")
    if args.classes is not None and not Path(args.classes).is_file():
        raise InputError(f"cannot read class list {args.classes}")
    return load_manifest(path, args.classes)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_stats(args) -> int:
    manifest = _load(args)
    stats = dataset_stats(manifest)
    width = max(len(n) for n in stats.class_names + ("images",))
    print(f"{'images':<{width}}  {stats.images}")
    for name, count in zip(stats.class_names, stats.instances):
        print(f"{name:<{width}}  {count}")
    print(f"{'instances':<{width}}  {stats.total_instances}")
    if args.out:
        rows = [("images", stats.images)] + list(zip(stats.class_names, stats.instances))
        _write_csv(_out_dir(args) / "stats.csv", ("item", "count"), rows)
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = _load(args)
    try:
        train, test = split_dataset(manifest, args.train_fraction, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = _out_dir(args)
    save_manifest(train, out / "train.json")
    save_manifest(test, out / "test.json")
    print(f"train {len(train)} images -> {out / 'train.json'}")
    print(f"test  {len(test)} images -> {out / 'test.json'}")
    return EXIT_OK


def cmd_anchors(args) -> int:
    manifest = _load(args)
    boxes = boxes_from_manifest(manifest)
    try:
        result = kmeans_anchors(boxes, args.k, args.seed, args.max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    text = json.dumps(result.to_json(args.k, args.seed), indent=2) + "\n"
    if args.out:
        (_out_dir(args) / "anchors.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _read_timings(path) -> list:
    try:
        values = [float(line) for line in Path(path).read_text().split() if line]
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read timings {path}: {exc}") from None
    if not values:
        raise InputError(f"no timings in {path}")
    return values


def cmd_eval(args) -> int:
    manifest = _load(args)
    det_path = Path(args.detections)
    if not det_path.is_file():
        raise InputError(f"cannot read detections {det_path}")
    try:
        detections = read_detections(det_path)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    latency = latency_stats(_read_timings(args.timings)) if args.timings else None
    thresholds = tuple(args.iou) if args.iou else DEFAULT_IOU_THRESHOLDS
    mode = MODES[args.mode]
    try:
        report = evaluate(manifest, detections, thresholds, INTERPOLATIONS[args.interp], latency)
    except KeyError as exc:
        offenders = exc.args[0]
        raise InputError("detections reference unknown image ids: " + ", ".join(offenders)) from None
    except ValueError as exc:
        raise InputError(str(exc)) from None

    out = _out_dir(args)
    names = report.class_names
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")

    rows = []
    for c, name in enumerate(names):
        for t in report.iou_thresholds:
            tp, fp, fn = report.counts[mode][t][c]
            rows.append((name, fmt(t), fmt(report.ap[t][c]), tp, fp, fn, args.mode))
    _write_csv(out / "report.csv", ("class", "iou", "AP", "TP", "FP", "FN", "mode"), rows)

    summary = [(fmt(t), fmt(report.map[t]), fmt(report.average_iou[t])) for t in report.iou_thresholds]
    _write_csv(out / "map.csv", ("iou", "mAP", "average_iou"), summary)

    pr_rows = [
        (name, fmt(t), fmt(p.recall), fmt(p.precision), fmt(p.threshold))
        for t in report.iou_thresholds
        for c, name in enumerate(names)
        for p in report.pr_curves[t][c]
    ]
    _write_csv(out / "pr_curves.csv", ("class", "iou", "recall", "precision", "threshold"), pr_rows)

    if report.latency is not None:
        lat = report.latency
        _write_csv(out / "latency.csv", ("mean_ms", "median_ms", "p95_ms", "samples"),
                   [(fmt(lat.mean_ms), fmt(lat.median_ms), fmt(lat.p95_ms), lat.samples)])

    if not args.no_figures:
        from .plotting import render_report
        render_report(report, out, mode)

    for c in report.excluded_classes:
        log.warning("class %s has no ground truth and is excluded from mAP", names[c])
    head = 0.5 if 0.5 in report.iou_thresholds else report.iou_thresholds[0]
    print(f"mAP@{head:g} = {fmt(report.map[head]) or 'n/a'}")
    for t in report.iou_thresholds:
        print(f"  iou {t:g}: mAP {fmt(report.map[t]) or 'n/a'}  avg IoU {fmt(report.average_iou[t]) or 'n/a'}")
    return EXIT_OK


def cmd_encode_check(args) -> int:
    manifest = _load(args)
    S, B, C = args.grid, args.boxes, manifest.schema.num_classes
    out = _out_dir(args) if args.out else None
    checked = mismatched = dropped = 0
    for ann in manifest.annotations:
        try:
            grid = encode_v1(ann, S, B, C, strict=args.strict)
        except CellCollisionError as exc:
            raise InputError(f"{ann.image_id}: {exc}") from None
        blob = v1_to_bytes(grid)
        if out is not None:
            (out / f"{ann.image_id}.grid").write_bytes(blob)
        dets = decode_v1(v1_from_bytes(blob), S, B, C, 0.5, ann.image_id)
        kept = _first_per_cell(ann, S)
        got = sorted((d.class_id,) + d.box.as_tuple() for d in dets)
        want = sorted((c,) + b.as_tuple() for c, b in kept)
        # float32 storage: compare at single precision
        ok = len(got) == len(want) and all(
            g[0] == w[0] and np.allclose(g[1:], w[1:], atol=1e-6) for g, w in zip(got, want)
        )
        checked += 1
        mismatched += not ok
        dropped += len(grid.dropped)
        if not ok:
            log.error("%s: roundtrip mismatch", ann.image_id)
    print(f"encode-check S={S} B={B} C={C}: {checked} images, {mismatched} mismatches, "
          f"{dropped} objects dropped by cell collisions")
    return EXIT_OK if mismatched == 0 else EXIT_CHECK_FAILED


def _first_per_cell(ann, S):
    """Boxes that survive keep-first collision handling."""
    seen, kept = set(), []
    for c, b in ann.boxes:
        cell = cell_index(b.cx, b.cy, S)
        if cell not in seen:
            kept.append((c, b))
            seen.add(cell)
    return kept


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    results = run_selfcheck()
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salatdet", description="YOLO detection maths and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_manifest(p, out_required=False):
        p.add_argument("--manifest", required=True, help="manifest JSON")
        p.add_argument("--classes", default=None, help="classes.txt (default: beside the manifest)")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        return p

    p = with_manifest(sub.add_parser("stats", help="image and instance counts"))
    p.set_defaults(func=cmd_stats)

    p = with_manifest(sub.add_parser("split", help="seeded train/test split"), out_required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = with_manifest(sub.add_parser("anchors", help="k-means anchors under IoU distance"))
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=300)
    p.set_defaults(func=cmd_anchors)

    p = with_manifest(sub.add_parser("eval", help="AP/mAP, TP/FP/FN, average IoU"), out_required=True)
    p.add_argument("--detections", required=True, help="detections JSON lines")
    p.add_argument("--iou", type=float, action="append", help="IoU threshold (repeatable)")
    p.add_argument("--mode", choices=sorted(MODES), default="voc", help="TP/FP/FN rule for the CSV")
    p.add_argument("--interp", choices=sorted(INTERPOLATIONS), default="allpoint")
    p.add_argument("--timings", default=None, help="per-image inference times in ms, one per line")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p.set_defaults(func=cmd_eval)

    p = with_manifest(sub.add_parser("encode-check", help="v1 grid encode/serialize/decode roundtrip"))
    p.add_argument("--grid", type=int, default=7, help="cells per side")
    p.add_argument("--boxes", type=int, default=2, help="boxes per cell")
    p.add_argument("--strict", action="store_true", help="fail on cell collisions")
    p.set_defaults(func=cmd_encode_check)

    p = sub.add_parser("selfcheck", help="run the built-in verification battery")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ManifestError, LabelParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
