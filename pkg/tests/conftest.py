import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(LINES, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(LINES[key])
