import numpy as np
import pytest

from dbnrl.gradient import random_instance

# filled by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_instance(rng):
    return random_instance(rng, 6, 3, 2)
