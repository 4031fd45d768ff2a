import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("anls", deadline=None, max_examples=15, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("anls")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULT_LINES
    except ImportError:
        return
    if RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in RESULT_LINES:
            terminalreporter.write_line(line)
