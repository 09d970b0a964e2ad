import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])
