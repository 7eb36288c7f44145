from __future__ import annotations

import numpy as np
import pytest

from meshcal.simulator import RangingModel, ScenarioSpec, generate_dataset
from meshcal.types import DistanceMatrix

ACCEPTANCE_LINES: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    """Remember one acceptance verdict for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


NOISELESS = RangingModel(
    sigma_los=0.0,
    nlos_bias_scale=0.0,
    sigma_nlos_base=0.0,
    dropout_prob_los=0.0,
    dropout_prob_nlos=0.0,
    outlier_prob=0.0,
)


def matrix_from_points(points, epoch: float = 0.0, drop=()) -> DistanceMatrix:
    xy = np.asarray(points, dtype=float)
    d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    for i, j in drop:
        d[i, j] = d[j, i] = np.nan
    return DistanceMatrix.from_array(epoch, d)


@pytest.fixture
def noiseless_square():
    """Four nodes at the corners of a 10 m square plus one inside."""
    pts = [(0, 0), (10, 0), (0, 10), (10, 10), (4, 3)]
    return pts, matrix_from_points(pts)


@pytest.fixture(scope="session")
def small_noisy_dataset():
    spec = ScenarioSpec(n_nodes=6, hall_width=20, hall_height=15, n_epochs=40, layout="grid")
    return generate_dataset(spec, RangingModel(seed=3))
