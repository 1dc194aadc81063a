import numpy as np
import pytest

from stratmover.binary import BinaryStratum, binary_summaries
from stratmover.core import ConfidenceInterval, StratumGroupSummary

BIOASSAY = [
    BinaryStratum(5, 79, 4, 16),
    BinaryStratum(3, 87, 2, 16),
    BinaryStratum(10, 90, 4, 18),
    BinaryStratum(3, 82, 1, 15),
]


@pytest.fixture
def bioassay():
    return list(BIOASSAY)


def cell(est, lo, hi, n=50, var=None, level=0.95):
    if var is None:
        var = ((hi - lo) / (2 * 1.959963984540054)) ** 2
    return StratumGroupSummary(est, var, ConfidenceInterval(lo, hi, level), n)


def rounded(ci, digits=3):
    return round(ci.lower, digits), round(ci.upper, digits)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_LINES]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
