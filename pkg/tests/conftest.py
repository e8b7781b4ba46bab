import numpy as np
import pytest

from plansel.graph import PlanningGraph

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_graph(rng, n=None, representation="grounded", max_nodes=8, density=1.5, task_id="g"):
    n = n if n is not None else int(rng.integers(1, max_nodes + 1))
    k = 6 if representation == "grounded" else 15
    m = int(rng.integers(0, int(density * n) + 2))
    edges = rng.integers(0, n, size=(m, 2))
    return PlanningGraph(task_id, "dom", representation, rng.integers(0, k, n), edges)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record one acceptance line per criterion, printed in the terminal summary."""
    def record(name, passed, detail=""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
