import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stab.dynamics import ControlSet, make_field
from stab.lyapunov import builtin_quadratic_clp
from stab.measures import EmpiricalMeasure

settings.register_profile("stab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stab")


def brute_w2_squared(a, b):
    """Exhaustive oracle: uniform measures, replicated to a common size, all permutations."""
    pa, pb = np.asarray(a, float), np.asarray(b, float)
    if pa.ndim == 1:
        pa, pb = pa[:, None], pb[:, None]
    n = math.lcm(len(pa), len(pb))
    xa = np.repeat(pa, n // len(pa), axis=0)
    xb = np.repeat(pb, n // len(pb), axis=0)
    c = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=2)
    rows = np.arange(n)
    return min(c[rows, list(p)].mean() for p in itertools.permutations(range(n)))


@pytest.fixture(scope="session")
def U2():
    return ControlSet.axis_grid(2)


@pytest.fixture(scope="session")
def steer():
    return make_field("linear_steer")


@pytest.fixture(scope="session")
def clp2(U2):
    return builtin_quadratic_clp(EmpiricalMeasure.dirac([0.0, 0.0]), U2)


@pytest.fixture(scope="session")
def clp2_raw(U2):
    """Uncalibrated pair with eps0 = 1."""
    return builtin_quadratic_clp(EmpiricalMeasure.dirac([0.0, 0.0]), U2, calibrate=False)


# acceptance summary: one PASS/FAIL line per criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_collection_modifyitems(config, items):
    # the acceptance module times the whole session, so it runs last
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
