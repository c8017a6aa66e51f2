import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from online_es.graphs import LinearGraph, LinearLossSpec, LorenzGraph  # noqa: E402


@pytest.fixture(scope="session")
def lorenz():
    return LorenzGraph()


@pytest.fixture(scope="session")
def short_lorenz():
    return LorenzGraph(horizon=200)


@pytest.fixture
def small_spec():
    return LinearLossSpec.random(6, 2, seed=3)


@pytest.fixture
def small_graph(small_spec):
    return LinearGraph(small_spec)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
