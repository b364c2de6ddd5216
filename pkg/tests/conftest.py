import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("akern", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("akern")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, P, rank=None):
    A = rng.standard_normal((P, rank or P))
    return A @ A.T / A.shape[1]


# acceptance verdicts, one line per criterion, echoed in the terminal summary
VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
