import numpy as np
import pytest

from metastab import model as M
from metastab.domain import Disk, Interval, build_grid
from metastab.scenarios import STOCK

# acceptance verdict lines, echoed in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def s1_spec(g=None, lo=-1.0, hi=2.0, k=1.0):
    g = M.piecewise_linear_g(0, [-1, -0.5, 2], [1, 0, 0]) if g is None else g
    return M.ProblemSpec(Interval(lo, hi), M.DriftField(M.linear_drift(k), abs(k), 1.0, 0.5),
                         M.DiffusionField(M.constant_diffusion(1.0), 1.0), M.BoundaryData(g))


@pytest.fixture(scope="session")
def s1a():
    return STOCK["ou1d"].problem()


@pytest.fixture(scope="session")
def s2():
    return STOCK["ramp"].problem()


@pytest.fixture(scope="session")
def s3():
    return STOCK["disk"].problem()


@pytest.fixture(scope="session")
def s1a_grid(s1a):
    return build_grid(s1a.domain, 2e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
