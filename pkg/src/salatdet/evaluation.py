"""
Detection evaluation: matching, precision/recall, AP/mAP over several IoU
thresholds, TP/FP/FN counts, average IoU of matches and latency statistics.

Two matching rules are available:

``voc``
    Per class, highest score first. A detection takes the unmatched
    ground truth of its class with the highest IoU if that IoU reaches the
    threshold (TP), otherwise it is a FP. Unmatched ground truths are FN.
    AP is always computed from this rule.

``paper``
    Class-blind spatial matching. A detection that overlaps an unmatched
    ground truth is a TP when the classes agree and a FP when they do not;
    a detection overlapping nothing is not counted at all. Ground truths
    with no spatial match are FN.
"""

from __future__ import annotations

import math
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset import DatasetManifest, ImageAnnotation
from .geometry import centers_to_corners, iou_matrix
from .postprocess import DetectionRecord, corners_of

VOC = "voc_standard"
PAPER = "paper_literal"
ALL_POINT = "all_point"
ELEVEN_POINT = "eleven_point"
DEFAULT_IOU_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)

TP, FP = "TP", "FP"


@dataclass(frozen=True)
class DetectionMatch:
    detection: DetectionRecord
    gt_index: Optional[int]
    iou: float
    verdict: Optional[str]  # "TP", "FP", or None when not counted


@dataclass
class MatchOutcome:
    detections: List[DetectionMatch]
    gt_matched: List[bool]
    gt_classes: List[int]
    mode: str = VOC

    @property
    def tp(self) -> int:
        return sum(m.verdict == TP for m in self.detections)

    @property
    def fp(self) -> int:
        return sum(m.verdict == FP for m in self.detections)

    @property
    def fn(self) -> int:
        return sum(not m for m in self.gt_matched)

    def counts_by_class(self) -> Dict[int, Tuple[int, int, int]]:
        """class -> (TP, FP, FN); detections count under their predicted class."""
        tally: Dict[int, List[int]] = defaultdict(lambda: [0, 0, 0])
        for m in self.detections:
            if m.verdict == TP:
                tally[m.detection.class_id][0] += 1
            elif m.verdict == FP:
                tally[m.detection.class_id][1] += 1
        for matched, c in zip(self.gt_matched, self.gt_classes):
            if not matched:
                tally[c][2] += 1
        return {c: tuple(v) for c, v in tally.items()}


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    threshold: float


def _check_threshold(t: float) -> None:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must be in (0, 1], got {t}")


def _normalize_mode(mode: str) -> str:
    aliases = {"voc": VOC, VOC: VOC, "paper": PAPER, PAPER: PAPER}
    try:
        return aliases[mode]
    except KeyError:
        raise ValueError(f"unknown matching mode {mode!r}") from None


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: ImageAnnotation,
    iou_threshold: float = 0.5,
    mode: str = VOC,
) -> MatchOutcome:
    _check_threshold(iou_threshold)
    mode = _normalize_mode(mode)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    gt_classes = [c for c, _ in gts.boxes]
    matched = [False] * len(gt_classes)
    if not dets:
        return MatchOutcome([], matched, gt_classes, mode)
    if gt_classes:
        gt_corners = centers_to_corners(np.array([b.as_tuple() for _, b in gts.boxes]))
        overlaps = iou_matrix(corners_of(dets), gt_corners)
    else:
        overlaps = np.zeros((len(dets), 0))
    gt_cls = np.array(gt_classes, dtype=int)

    results = []
    for i, det in enumerate(dets):
        candidates = overlaps[i].copy()
        candidates[np.array(matched, dtype=bool)] = -1.0
        if mode == VOC:
            candidates[gt_cls != det.class_id] = -1.0
        j = int(np.argmax(candidates)) if len(candidates) else -1
        if j < 0 or candidates[j] < iou_threshold:
            verdict = FP if mode == VOC else None
            best = float(overlaps[i].max()) if len(candidates) else 0.0
            results.append(DetectionMatch(det, None, best, verdict))
            continue
        matched[j] = True
        verdict = TP if gt_classes[j] == det.class_id else FP
        results.append(DetectionMatch(det, j, float(overlaps[i, j]), verdict))
    return MatchOutcome(results, matched, gt_classes, mode)


# ----------------------------------------------------------------------
# Precision / recall and AP
# ----------------------------------------------------------------------

def pr_curve(scored: Iterable[Tuple[float, bool]], n_gt: int) -> List[PRPoint]:
    """Cumulative precision/recall over detections sorted by score.

    ``scored`` holds (score, is_tp) pairs pooled over the test set; the sort
    is stable so equal scores keep their pooled order.
    """
    if n_gt < 1:
        raise ValueError("precision/recall needs at least one ground-truth instance")
    scored = sorted(scored, key=lambda s: -s[0])
    points, tp, fp = [], 0, 0
    for score, hit in scored:
        tp += bool(hit)
        fp += not hit
        points.append(PRPoint(tp / n_gt, tp / (tp + fp), score))
    return points


def average_precision(
    scored: Iterable[Tuple[float, bool]], n_gt: int, interpolation: str = ALL_POINT
) -> float:
    points = pr_curve(scored, n_gt)
    if not points:
        return 0.0
    recall = np.array([p.recall for p in points])
    precision = np.array([p.precision for p in points])
    if interpolation == ALL_POINT:
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    if interpolation == ELEVEN_POINT:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t - 1e-12]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    raise ValueError(f"unknown interpolation {interpolation!r}")


def mean_ap(per_class_ap: Mapping[object, Optional[float]]) -> float:
    """Unweighted mean over classes; ``None`` entries (no ground truth) are excluded."""
    included = [ap for ap in per_class_ap.values() if ap is not None]
    if not included:
        raise ValueError("no class with ground-truth instances to average")
    return float(sum(included) / len(included))


def average_iou(outcomes: Iterable[MatchOutcome]) -> Optional[float]:
    ious = [m.iou for o in outcomes for m in o.detections if m.verdict == TP]
    if not ious:
        return None
    return float(sum(ious) / len(ious))


# ----------------------------------------------------------------------
# Latency
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    samples: int

    def to_json(self) -> dict:
        return {"mean_ms": self.mean_ms, "median_ms": self.median_ms,
                "p95_ms": self.p95_ms, "samples": self.samples}


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("percentile of an empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def latency_stats(durations_ms: Sequence[float]) -> LatencyStats:
    if not durations_ms:
        raise ValueError("no latency samples")
    return LatencyStats(
        float(statistics.fmean(durations_ms)),
        float(statistics.median(durations_ms)),
        float(nearest_rank(durations_ms, 95)),
        len(durations_ms),
    )


def timing_harness(
    runner: Callable[[object], object],
    images: Sequence[object],
    warmup: int = 1,
    repeats: int = 1,
    clock: Callable[[], float] = time.perf_counter,
) -> LatencyStats:
    """Per-image latency of ``runner``.

    ``warmup`` unrecorded calls come first, then every image is timed
    ``repeats`` times in order. ``clock`` returns seconds and must be
    monotonic.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    images = list(images)
    if not images:
        raise ValueError("timing harness needs at least one image")
    for i in range(warmup):
        runner(images[i % len(images)])
    durations = []
    for _ in range(repeats):
        for image in images:
            start = clock()
            runner(image)
            durations.append((clock() - start) * 1000.0)
    return latency_stats(durations)


# ----------------------------------------------------------------------
# Whole-dataset report
# ----------------------------------------------------------------------

@dataclass
class EvalReport:
    class_names: Tuple[str, ...]
    iou_thresholds: Tuple[float, ...]
    interpolation: str
    ap: Dict[float, Dict[int, Optional[float]]]
    map: Dict[float, Optional[float]]
    counts: Dict[str, Dict[float, Dict[int, Tuple[int, int, int]]]]
    average_iou: Dict[float, Optional[float]]
    pr_curves: Dict[float, Dict[int, List[PRPoint]]]
    gt_instances: Tuple[int, ...]
    latency: Optional[LatencyStats] = None
    excluded_classes: Tuple[int, ...] = field(default=())

    def to_json(self) -> dict:
        names = self.class_names
        key = _threshold_key
        return {
            "classes": list(names),
            "iou_thresholds": list(self.iou_thresholds),
            "interpolation": self.interpolation,
            "ap_source_mode": VOC,
            "gt_instances": dict(zip(names, self.gt_instances)),
            "excluded_classes": [names[c] for c in self.excluded_classes],
            "map": {key(t): self.map[t] for t in self.iou_thresholds},
            "ap": {
                names[c]: {key(t): self.ap[t][c] for t in self.iou_thresholds}
                for c in range(len(names))
            },
            "counts": {
                mode: {
                    names[c]: {
                        key(t): dict(zip(("tp", "fp", "fn"), per_t[t][c]))
                        for t in self.iou_thresholds
                    }
                    for c in range(len(names))
                }
                for mode, per_t in self.counts.items()
            },
            "average_iou": {key(t): self.average_iou[t] for t in self.iou_thresholds},
            "latency": self.latency.to_json() if self.latency else None,
        }


def _threshold_key(t: float) -> str:
    return f"{t:g}"


def group_by_image(detections: Iterable[DetectionRecord]) -> Dict[str, List[DetectionRecord]]:
    grouped: Dict[str, List[DetectionRecord]] = defaultdict(list)
    for d in detections:
        grouped[d.image_id].append(d)
    return grouped


def evaluate(
    manifest: DatasetManifest,
    detections: Sequence[DetectionRecord],
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    interpolation: str = ALL_POINT,
    latency: Optional[LatencyStats] = None,
) -> EvalReport:
    """Evaluate detections against a manifest at every IoU threshold.

    Raises ``KeyError`` listing detections whose image id is not in the
    manifest.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    for t in thresholds:
        _check_threshold(t)
    if interpolation not in (ALL_POINT, ELEVEN_POINT):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    n_classes = manifest.schema.num_classes
    known = manifest.by_id()
    grouped = group_by_image(detections)
    unknown = sorted(set(grouped) - set(known))
    if unknown:
        raise KeyError(unknown)
    for d in detections:
        if d.class_id >= n_classes:
            raise ValueError(f"detection class {d.class_id} outside {n_classes} classes")

    gt_instances = [0] * n_classes
    for ann in manifest.annotations:
        for c, _ in ann.boxes:
            gt_instances[c] += 1
    excluded = tuple(c for c in range(n_classes) if gt_instances[c] == 0)

    ap: Dict[float, Dict[int, Optional[float]]] = {}
    maps: Dict[float, Optional[float]] = {}
    counts: Dict[str, Dict[float, Dict[int, Tuple[int, int, int]]]] = {VOC: {}, PAPER: {}}
    avg_iou: Dict[float, Optional[float]] = {}
    curves: Dict[float, Dict[int, List[PRPoint]]] = {}

    for t in thresholds:
        per_class_scored: Dict[int, List[Tuple[float, bool]]] = defaultdict(list)
        voc_outcomes = []
        for mode in (VOC, PAPER):
            tally = {c: [0, 0, 0] for c in range(n_classes)}
            for ann in manifest.annotations:
                outcome = match_detections(grouped.get(ann.image_id, []), ann, t, mode)
                for c, (tp, fp, fn) in outcome.counts_by_class().items():
                    tally[c][0] += tp
                    tally[c][1] += fp
                    tally[c][2] += fn
                if mode == VOC:
                    voc_outcomes.append(outcome)
                    for m in outcome.detections:
                        per_class_scored[m.detection.class_id].append((m.detection.score, m.verdict == TP))
            counts[mode][t] = {c: tuple(v) for c, v in tally.items()}

        ap[t], curves[t] = {}, {}
        for c in range(n_classes):
            if gt_instances[c] == 0:
                ap[t][c] = None
                curves[t][c] = []
                continue
            scored = per_class_scored.get(c, [])
            ap[t][c] = average_precision(scored, gt_instances[c], interpolation)
            curves[t][c] = pr_curve(scored, gt_instances[c])
        maps[t] = mean_ap(ap[t]) if len(excluded) < n_classes else None
        avg_iou[t] = average_iou(voc_outcomes)

    return EvalReport(
        class_names=manifest.schema.names,
        iou_thresholds=thresholds,
        interpolation=interpolation,
        ap=ap,
        map=maps,
        counts=counts,
        average_iou=avg_iou,
        pr_curves=curves,
        gt_instances=tuple(gt_instances),
        latency=latency,
        excluded_classes=excluded,
    )
