import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from bihyper.problems import BilevelState, ToySupernet, enumerate_and_rank, make_preset  # noqa: E402


@pytest.fixture
def scalar():
    return make_preset("quad-scalar")


@pytest.fixture
def quad10():
    return make_preset("quad-10d")


@pytest.fixture(scope="session")
def ridge():
    return make_preset("ridge-20f")


@pytest.fixture(scope="session")
def toynas():
    return ToySupernet()


@pytest.fixture(scope="session")
def toynas_ranking(toynas):
    return enumerate_and_rank(toynas)


@pytest.fixture
def scalar_at_opt():
    """Scalar quadratic state at w*(alpha=1) = 0.5."""
    return BilevelState(np.array([0.5]), np.array([1.0]))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
