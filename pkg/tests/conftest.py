import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from satgnn.graph import Graph

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(n: int, p: float, rng: np.random.Generator, dim: int = 3, classes: int = 2) -> Graph:
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    feats = rng.normal(size=(n, dim))
    labels = rng.integers(0, classes, n)
    return Graph.from_edges(n, edges, feats, labels, classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_graph(rng):
    return random_graph(6, 0.5, rng)


@pytest.fixture
def star_graph():
    # center 0 with leaves 1, 2: segment of node 0 is edges (0<-0, 0<-1, 0<-2)
    return Graph.from_edges(3, [(0, 1), (0, 2)], np.eye(3))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
