import json

import pytest

from salatdet.dataset import ClassSchema, save_manifest, synthetic_manifest

# published split sizes: images and per-class instances
TRAIN_IMAGES, TRAIN_COUNTS = 764, (303, 210, 174, 179)
TEST_IMAGES, TEST_COUNTS = 85, (37, 27, 11, 22)


@pytest.fixture
def schema():
    return ClassSchema()


@pytest.fixture
def published_train():
    return synthetic_manifest(TRAIN_COUNTS, TRAIN_IMAGES, seed=1, prefix="train")


@pytest.fixture
def published_test():
    return synthetic_manifest(TEST_COUNTS, TEST_IMAGES, seed=2, prefix="test")


@pytest.fixture
def manifest_file(tmp_path, published_test):
    path = tmp_path / "data" / "manifest.json"
    path.parent.mkdir()
    save_manifest(published_test, path)
    return path


def write_perfect_detections(manifest, path, score=1.0):
    with open(path, "w") as fh:
        for ann in manifest.annotations:
            for c, b in ann.boxes:
                fh.write(json.dumps({"image_id": ann.image_id, "class_id": c, "score": score,
                                     "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}) + "\n")
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
