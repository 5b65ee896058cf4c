import numpy as np
import pytest

from delaysmooth.catalog import _s1, _s2, _s3
from delaysmooth.dynamics import Segment


@pytest.fixture(scope="session")
def s1():
    return _s1()


@pytest.fixture(scope="session")
def s2():
    return _s2()


@pytest.fixture(scope="session")
def s3():
    return _s3()


@pytest.fixture
def ones_segment():
    return Segment.constant(1.0, 1.0, 1.0)


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise")


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line; call with ``(number, ok, detail)``."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
