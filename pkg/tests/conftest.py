import numpy as np
import pytest

from spikebev.ingest import GridMeta
from spikebev.pipeline import SceneDataset
from spikebev.synthetic import generate_synthetic_scene


def synthetic_set(seed: int, n: int, meta: GridMeta | None = None, n_bins: int = 8) -> SceneDataset:
    """``n`` scenes with 1-5 objects each, drawn from one seed."""
    meta = meta or GridMeta()
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for _ in range(n):
        pc, lab = generate_synthetic_scene(int(rng.integers(1 << 30)), int(rng.integers(1, 6)), meta)
        clouds.append(pc)
        labels.append(lab)
    return SceneDataset.from_scenes(clouds, labels, meta, n_bins)


@pytest.fixture(scope="session")
def small_set():
    return synthetic_set(100, 4)


@pytest.fixture(scope="session")
def sixteen_set():
    return synthetic_set(101, 16)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record_acceptance(number: int, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
