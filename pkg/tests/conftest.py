import pytest

from gharnack.gcore import GParams, TimeGrid
from gharnack.gsde import HamiltonianSystem


@pytest.fixture
def params():
    return GParams(1.0, 2.0)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 64)


@pytest.fixture
def flat_system():
    """Zero drifts, A=0, M=1, Q=1: Y is a G-Brownian motion started at y0."""
    return HamiltonianSystem(A=0.0, M=1.0, Q=1.0)


@pytest.fixture
def oscillator():
    return HamiltonianSystem.damped_oscillator()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
