import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssllanes.synthgen import WorldConfig, gen_dataset

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TABLES: dict[int, str] = {}


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(WorldConfig(seed=11, n_scenes=60))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for k in sorted(ACCEPTANCE_TABLES):
        terminalreporter.write_line("")
        terminalreporter.write_line(f"criterion {k} table")
        for line in ACCEPTANCE_TABLES[k].splitlines():
            terminalreporter.write_line(line)
