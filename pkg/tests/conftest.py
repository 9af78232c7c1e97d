from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sm7_path():
    return SCENARIOS / "sm7_topology.txt"


@pytest.fixture(scope="session")
def sm7(sm7_path):
    from distfilt.network import read_topology

    return read_topology(sm7_path)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run acceptance table."""

    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
