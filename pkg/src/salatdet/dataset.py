"""
Ground-truth annotation sets in the darknet label format.

A label file has one object per line::

    class_id cx cy w h

with coordinates normalized to the image size. A whole dataset is kept as a
JSON manifest; class names live in a sidecar ``classes.txt`` where the line
index is the class id.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import BBoxCenter

POSTURE_CLASSES = (
    "Qiyam(Standing)",
    "Ruku(Bowing)",
    "Sujud(Prostrating)",
    "Julus(Sitting)",
)

Box = Tuple[int, BBoxCenter]
PathLike = Union[str, Path]


class LabelParseError(ValueError):
    """Raised for a malformed label line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str, source: Optional[str] = None):
        self.line_no = line_no
        self.source = source
        where = f"{source}:" if source else ""
        super().__init__(f"{where}line {line_no}: {message}")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSchema:
    names: Tuple[str, ...] = POSTURE_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("class schema needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names in schema")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_classes(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: str
    boxes: Tuple[Box, ...] = ()
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple((int(c), b) for c, b in self.boxes))
        for dim in (self.width, self.height):
            if dim is not None and dim <= 0:
                raise ValueError(f"{self.image_id}: image dimensions must be positive")

    def validate(self, schema: ClassSchema) -> None:
        for class_id, _ in self.boxes:
            if not 0 <= class_id < schema.num_classes:
                raise ManifestError(
                    f"{self.image_id}: class id {class_id} outside schema of {schema.num_classes}"
                )


@dataclass(frozen=True)
class DatasetManifest:
    annotations: Tuple[ImageAnnotation, ...]
    schema: ClassSchema = field(default_factory=ClassSchema)

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        seen = set()
        for ann in self.annotations:
            if ann.image_id in seen:
                raise ManifestError(f"duplicate image id {ann.image_id!r}")
            seen.add(ann.image_id)
            ann.validate(self.schema)

    def __len__(self) -> int:
        return len(self.annotations)

    def by_id(self) -> Dict[str, ImageAnnotation]:
        return {a.image_id: a for a in self.annotations}


@dataclass(frozen=True)
class DatasetStats:
    images: int
    instances: Tuple[int, ...]
    class_names: Tuple[str, ...]

    @property
    def total_instances(self) -> int:
        return sum(self.instances)

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        if self.class_names != other.class_names:
            raise ValueError("cannot add stats over different class schemas")
        return DatasetStats(
            self.images + other.images,
            tuple(a + b for a, b in zip(self.instances, other.instances)),
            self.class_names,
        )


# ----------------------------------------------------------------------
# Label files
# ----------------------------------------------------------------------

def parse_label_file(text: str, schema: ClassSchema, source: Optional[str] = None) -> List[Box]:
    boxes: List[Box] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise LabelParseError(line_no, f"expected 5 fields, got {len(tokens)}", source)
        try:
            class_id = int(tokens[0])
        except ValueError:
            raise LabelParseError(line_no, f"class id {tokens[0]!r} is not an integer", source) from None
        try:
            cx, cy, w, h = (float(t) for t in tokens[1:])
        except ValueError:
            raise LabelParseError(line_no, "non-numeric coordinate", source) from None
        if not 0 <= class_id < schema.num_classes:
            raise LabelParseError(
                line_no, f"class id {class_id} out of range for {schema.num_classes} classes", source
            )
        if not all(math.isfinite(v) for v in (cx, cy, w, h)):
            raise LabelParseError(line_no, "non-finite coordinate", source)
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise LabelParseError(line_no, f"center ({cx}, {cy}) outside [0, 1]", source)
        if not (0.0 <= w <= 1.0 and 0.0 <= h <= 1.0):
            raise LabelParseError(line_no, f"size ({w}, {h}) outside [0, 1]", source)
        boxes.append((class_id, BBoxCenter(cx, cy, w, h)))
    return boxes


def serialize_labels(boxes: Sequence[Box]) -> str:
    return "".join(
        f"{c} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for c, b in boxes
    )


def load_classes(path: PathLike) -> ClassSchema:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    return ClassSchema(tuple(n for n in names if n))


def save_classes(schema: ClassSchema, path: PathLike) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in schema.names), encoding="utf-8")


def manifest_from_label_dir(directory: PathLike, schema: ClassSchema) -> DatasetManifest:
    """Build a manifest from a directory of ``<image_id>.txt`` label files."""
    directory = Path(directory)
    annotations = []
    for path in sorted(directory.glob("*.txt")):
        if path.name == "classes.txt":
            continue
        boxes = parse_label_file(path.read_text(encoding="utf-8"), schema, source=str(path))
        annotations.append(ImageAnnotation(path.stem, tuple(boxes)))
    return DatasetManifest(tuple(annotations), schema)


# ----------------------------------------------------------------------
# Manifest JSON
# ----------------------------------------------------------------------

def manifest_to_dict(manifest: DatasetManifest) -> dict:
    images = []
    for ann in manifest.annotations:
        images.append({
            "image_id": ann.image_id,
            "width": ann.width,
            "height": ann.height,
            "boxes": [
                {"class": c, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                for c, b in ann.boxes
            ],
        })
    return {"images": images}


def manifest_from_dict(doc, schema: ClassSchema) -> DatasetManifest:
    images = doc["images"] if isinstance(doc, dict) else doc
    annotations = []
    for entry in images:
        try:
            boxes = tuple(
                (int(b["class"]), BBoxCenter(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"])))
                for b in entry.get("boxes", [])
            )
            annotations.append(ImageAnnotation(
                str(entry["image_id"]), boxes, entry.get("width"), entry.get("height")
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest entry {entry!r}: {exc}") from None
    return DatasetManifest(tuple(annotations), schema)


def save_manifest(manifest: DatasetManifest, path: PathLike, write_classes: bool = True) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2) + "\n", encoding="utf-8")
    if write_classes:
        save_classes(manifest.schema, path.parent / "classes.txt")


def load_manifest(path: PathLike, classes_path: Optional[PathLike] = None) -> DatasetManifest:
    """Load a manifest; the schema comes from ``classes_path``, else a
    ``classes.txt`` beside the manifest, else the four posture classes."""
    path = Path(path)
    if classes_path is None and (path.parent / "classes.txt").exists():
        classes_path = path.parent / "classes.txt"
    schema = load_classes(classes_path) if classes_path is not None else ClassSchema()
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return manifest_from_dict(doc, schema)


# ----------------------------------------------------------------------
# Split and statistics
# ----------------------------------------------------------------------

def split_dataset(
    manifest: DatasetManifest, train_fraction: float = 0.9, seed: int = 0
) -> Tuple[DatasetManifest, DatasetManifest]:
    """Image-level seeded split; the training side gets floor(N * fraction)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    n_train = math.floor(n * train_fraction)
    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    anns = manifest.annotations
    return (
        DatasetManifest(tuple(anns[i] for i in train_idx), manifest.schema),
        DatasetManifest(tuple(anns[i] for i in test_idx), manifest.schema),
    )


def dataset_stats(manifest: DatasetManifest) -> DatasetStats:
    counts = Counter(c for ann in manifest.annotations for c, _ in ann.boxes)
    return DatasetStats(
        images=len(manifest),
        instances=tuple(counts.get(i, 0) for i in range(manifest.schema.num_classes)),
        class_names=manifest.schema.names,
    )


def synthetic_manifest(
    instances: Sequence[int],
    n_images: int,
    seed: int = 0,
    schema: Optional[ClassSchema] = None,
    prefix: str = "img",
) -> DatasetManifest:
    """Random manifest with exactly ``instances[c]`` boxes of each class.

    Boxes are dealt round-robin over a shuffled image order, so every image
    gets at least one box when there are enough instances.
    """
    schema = schema or ClassSchema()
    if len(instances) != schema.num_classes:
        raise ValueError("one instance count per class required")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(schema.num_classes), instances)
    rng.shuffle(labels)
    per_image: List[List[Box]] = [[] for _ in range(n_images)]
    slots = rng.permutation(n_images) if n_images else np.array([], dtype=int)
    for k, class_id in enumerate(labels):
        w, h = rng.uniform(0.05, 0.6, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        per_image[slots[k % n_images]].append((int(class_id), BBoxCenter(cx, cy, w, h)))
    width = len(str(max(n_images - 1, 0)))
    annotations = tuple(
        ImageAnnotation(f"{prefix}{i:0{width}d}", tuple(boxes), 640, 480)
        for i, boxes in enumerate(per_image)
    )
    return DatasetManifest(annotations, schema)
