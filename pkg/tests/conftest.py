import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from faceflow.model import synth_model

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_model():
    return synth_model(3, N=300, n_i=12, n_e=6)


@pytest.fixture(scope="session")
def face_model():
    return synth_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, recorded by test_acceptance.py
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
