import math

import numpy as np
import pytest

from ttshs.timing import EventTimeDistribution

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# laws with mean 2 used across modules
LAWS_MEAN2 = {
    "exponential": EventTimeDistribution.exponential(2.0),
    "gamma4": EventTimeDistribution.gamma(4.0, 0.5),
    "weibull3": EventTimeDistribution.weibull(3.0, 2.0 / math.gamma(4.0 / 3.0)),
    "lognormal": EventTimeDistribution.lognormal(np.log(2.0) - 0.08, 0.4),
    "deterministic": EventTimeDistribution.deterministic(2.0),
}
