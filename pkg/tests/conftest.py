import numpy as np
import pytest

from softerase.config import RunConfig
from softerase.evaluation import prepare
from softerase.selfcheck import random_params


@pytest.fixture(scope="session")
def default_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def trained(default_cfg):
    """Default synthetic corpus and the model trained on it."""
    return prepare(default_cfg)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params(np_rng):
    return random_params(np_rng)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
