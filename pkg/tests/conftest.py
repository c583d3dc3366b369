from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uarl.data import collect_rollouts, scripted_behavior_policy
from uarl.envs import DomainParams, EnvSpec, ParamRange

settings.register_profile("uarl", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("uarl")

NOMINAL = DomainParams(noise_scale=0.05, friction=0.1, mass_mult=1.0)


@pytest.fixture
def spec() -> EnvSpec:
    return EnvSpec("point_mass", 30, NOMINAL)


@pytest.fixture
def small_data(spec):
    beh = scripted_behavior_policy(spec, 0.1, 0)
    nominal = collect_rollouts(spec, ParamRange("mass_mult", 1.0, 1.0, NOMINAL), beh, 6, 1, "nominal", name="D_0")
    repulsive = collect_rollouts(spec, ParamRange("mass_mult", 1.0, 5.0, NOMINAL), beh, 6, 2, "repulsive", name="D_1")
    return nominal, repulsive


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(RESULTS):
        r = RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid:2d}: {r['status'].upper():4s} {r['detail']}")
