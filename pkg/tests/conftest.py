from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from pnrt.design import CompleteRandomization
from pnrt.network import DenseProximity
from pnrt.stats import OutcomeData

FIXTURES = Path(__file__).parent / "fixtures"
TOY_Y = [2.0, 5.0, 3.0, 1.0, 4.0, 6.0]


def ring(n: int) -> DenseProximity:
    i = np.arange(n)
    gap = np.abs(i[:, None] - i[None, :])
    return DenseProximity(np.minimum(gap, n - gap).astype(float))


def unit(n: int, *idx) -> np.ndarray:
    d = np.zeros(n, dtype=bool)
    d[list(idx)] = True
    return d


def random_network(rng, n: int, kind: str = "coords"):
    """Small random network: planar points or a random weighted graph metric."""
    from pnrt.network import CoordinateProximity
    from scipy.sparse.csgraph import shortest_path

    if kind == "coords":
        return CoordinateProximity(rng.random((n, 2)))
    W = np.where(rng.random((n, n)) < 0.5, rng.integers(1, 4, (n, n)).astype(float), 0.0)
    W = np.triu(W, 1)
    W = W + W.T
    D = shortest_path(W, directed=False)
    return DenseProximity(D)


@pytest.fixture
def hexagon():
    return ring(6)


@pytest.fixture
def toy_data():
    return OutcomeData(TOY_Y)


@pytest.fixture
def toy_mech():
    return CompleteRandomization(6, 1)


@pytest.fixture
def d_obs():
    return unit(6, 0)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
