from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from intersection_pdip.scenario_io import generate_random_scenario, scenario_from_dict

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_scenario(seed: int = 3, n_lanes: int = 2, per_lane: int = 2, K: int = 20, dist=(30.0, 60.0)):
    return scenario_from_dict(generate_random_scenario(seed, n_lanes, per_lane, dist, K=K))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def scn_small():
    return small_scenario()


# ---- acceptance report ----

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
