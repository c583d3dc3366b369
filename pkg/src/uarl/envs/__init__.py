from uarl.envs.continuous import DT, ContinuousEnv, EnvSpec, EpisodeDone, transition
from uarl.envs.gridworld import SlipGridEnv, TabularMDP, build_slipgrid, grid_metric
from uarl.envs.params import (
    PARAM_NAMES,
    BudgetExhausted,
    DomainParams,
    ParamRange,
    expand_range,
    range_from_schedule,
    sample_params,
)


def make_env(spec: EnvSpec, params: DomainParams, seed: int):
    """Build a seeded environment instance for ``spec.family`` under ``params``."""
    if not isinstance(params, DomainParams):
        raise TypeError(f"params must be DomainParams, got {type(params).__name__}")
    if spec.family == "slip_grid":
        return SlipGridEnv(spec, params, seed)
    return ContinuousEnv(spec, params, seed)


__all__ = [
    "DT",
    "PARAM_NAMES",
    "BudgetExhausted",
    "ContinuousEnv",
    "DomainParams",
    "EnvSpec",
    "EpisodeDone",
    "ParamRange",
    "SlipGridEnv",
    "TabularMDP",
    "build_slipgrid",
    "expand_range",
    "grid_metric",
    "make_env",
    "range_from_schedule",
    "sample_params",
    "transition",
]
