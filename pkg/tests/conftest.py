import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ms2d", derandomize=True, deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ms2d"))

SEEDS = list(range(20))


@pytest.fixture(autouse=True)
def _no_chunk_env(monkeypatch):
    monkeypatch.delenv("MS2D_CHUNK_BYTES", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance outcomes keyed by criterion number: (ok, detail)."""
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")
