import numpy as np
import pytest

from twcsim.core import reference_system
from twcsim.synthetic import synthetic_map


@pytest.fixture(scope="session")
def specs():
    return reference_system()


@pytest.fixture(scope="session")
def engine_map():
    return synthetic_map()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
