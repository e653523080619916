import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pluripot.geometry import build_domain

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def disc32():
    return build_domain({"kind": "ball", "n": 1, "h": 1 / 32})


@pytest.fixture(scope="session")
def disc16():
    return build_domain({"kind": "ball", "n": 1, "h": 1 / 16})


@pytest.fixture(scope="session")
def ball8():
    return build_domain({"kind": "ball", "n": 2, "h": 1 / 8})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
