import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evs.imagery import Frame, LabelMap, ProbabilityMap

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Remember a one-line verdict for the terminal summary and return ``passed``."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probs(rng, h, w, c):
    p = rng.random((h, w, c)) + 1e-3
    return ProbabilityMap(p / p.sum(axis=2, keepdims=True))


def stripes(w, h, c=4, period=4):
    lab = (np.arange(w)[None, :] // period % c) + np.zeros((h, 1), dtype=int)
    return LabelMap(lab.astype(np.uint8), c)


def solid_frame(w, h, value=128, index=0):
    return Frame(np.full((h, w, 3), value, np.uint8), index)
