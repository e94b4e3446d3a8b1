"""Detection records, confidence filtering and greedy non-maximum suppression."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from .geometry import BBoxCenter, centers_to_corners, iou_matrix


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    box: BBoxCenter

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    def to_json(self) -> dict:
        b = self.box
        return {
            "image_id": self.image_id, "class_id": self.class_id, "score": self.score,
            "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionRecord":
        return cls(
            str(obj["image_id"]),
            int(obj["class_id"]),
            float(obj["score"]),
            BBoxCenter(float(obj["cx"]), float(obj["cy"]), float(obj["w"]), float(obj["h"])),
        )


def corners_of(dets: Sequence[DetectionRecord]) -> np.ndarray:
    return centers_to_corners(np.array([d.box.as_tuple() for d in dets]).reshape(-1, 4))


def confidence_filter(detections: Iterable[DetectionRecord], min_score: float) -> List[DetectionRecord]:
    if not 0.0 <= min_score <= 1.0:
        raise ValueError(f"min_score must be in [0, 1], got {min_score}")
    return [d for d in detections if d.score >= min_score]


def nms(
    detections: Sequence[DetectionRecord],
    iou_threshold: float = 0.5,
    class_agnostic: bool = False,
) -> List[DetectionRecord]:
    """Greedy NMS over detections of a single image.

    Detections are visited by descending score (ties keep input order); each
    kept detection suppresses the remaining ones of its class, or of any
    class with ``class_agnostic``, whose IoU with it is >= ``iou_threshold``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    detections = list(detections)
    if not detections:
        return []
    if len({d.image_id for d in detections}) > 1:
        raise ValueError("nms called with detections from several images")

    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    overlaps = iou_matrix(corners_of(detections), corners_of(detections))
    classes = np.array([d.class_id for d in detections])
    alive = np.ones(len(detections), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(detections[i])
        hit = overlaps[i] >= iou_threshold
        if not class_agnostic:
            hit &= classes == classes[i]
        alive &= ~hit
    return kept


# ----------------------------------------------------------------------
# JSON-lines interchange: one detection object per line
# ----------------------------------------------------------------------

def read_detections(path: Union[str, Path]) -> List[DetectionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(DetectionRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad detection record ({exc})") from None
    return out


def write_detections(detections: Iterable[DetectionRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json()) + "\n")
