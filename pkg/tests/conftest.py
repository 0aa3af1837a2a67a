import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from balayage import McParams

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def mc_small():
    return McParams(samples=20_000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
