import numpy as np
import pytest

from voxatlas import phantom


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_subjects():
    """Six 16^3 phantom subjects, enough for quick training smoke tests."""
    return [phantom.generate_subject(s, dims=(16, 16, 16), spacing=4.0) for s in range(6)]


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
