import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("dlcaps", max_examples=60, deadline=None)
settings.load_profile("dlcaps")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def f64():
    from dlcaps import tensor as T

    with T.precision(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
