import numpy as np
import pytest

from cityseg.raster import InstanceMap

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(name: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def rect_map(height, width, rects):
    """Instance map from (row, col, h, w) rectangles, ids in list order."""
    labels = np.zeros((height, width), dtype=np.uint32)
    for k, (r, c, h, w) in enumerate(rects, start=1):
        labels[r : r + h, c : c + w] = k
    return InstanceMap.from_labels(labels)


def random_instance_map(rng, height=24, width=24):
    """Mixed blobs: rectangles, donuts, single pixels and speckle."""
    labels = np.zeros((height, width), dtype=np.uint32)
    next_id = 1
    for _ in range(rng.integers(1, 7)):
        kind = rng.integers(4)
        r, c = rng.integers(0, height - 2), rng.integers(0, width - 2)
        if kind == 0:
            h, w = rng.integers(1, 9, size=2)
            labels[r : r + h, c : c + w] = next_id
        elif kind == 1:
            h, w = rng.integers(3, 10, size=2)
            labels[r : r + h, c : c + w] = next_id
            labels[r + 1 : r + h - 1, c + 1 : c + w - 1] = 0
        elif kind == 2:
            labels[r, c] = next_id
        else:
            blob = rng.random((6, 6)) < 0.5
            sub = labels[r : r + 6, c : c + 6]
            sub[blob[: sub.shape[0], : sub.shape[1]]] = next_id
        next_id += 1
    return InstanceMap.from_labels(labels)
