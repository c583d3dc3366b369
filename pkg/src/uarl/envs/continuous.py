"""Desk-scale continuous-control environments with physical domain parameters.

Both families integrate with explicit (semi-implicit) Euler at ``DT`` and end
only at the horizon. ``friction`` acts as a per-step velocity decay factor
``1 - friction * DT`` and ``mass_mult`` divides the control authority.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from uarl.envs.params import DomainParams

DT = 0.05
FAMILIES = ("point_mass", "pendulum", "slip_grid")


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    family: str = "point_mass"
    horizon: int = 200
    nominal_params: DomainParams = field(default_factory=DomainParams)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"EnvSpec.family must be one of {FAMILIES}, got {self.family!r}")
        if int(self.horizon) < 1:
            raise ValueError(f"EnvSpec.horizon must be >= 1, got {self.horizon}")

    @property
    def state_dim(self) -> int:
        return {"point_mass": 4, "pendulum": 3, "slip_grid": 2}[self.family]

    @property
    def action_dim(self) -> int:
        return {"point_mass": 2, "pendulum": 1, "slip_grid": 1}[self.family]

    @property
    def max_action(self) -> float:
        return 1.0

    def to_dict(self) -> dict:
        return {"family": self.family, "horizon": int(self.horizon), "nominal_params": self.nominal_params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> EnvSpec:
        return cls(
            family=d["family"],
            horizon=int(d.get("horizon", 200)),
            nominal_params=DomainParams.from_dict(d.get("nominal_params", {})),
        )


# ---------------------------------------------------------------------------
# point mass

POINT_MASS_INIT = np.array([1.0, 1.0, 0.0, 0.0])
POINT_MASS_GOAL = np.zeros(2)
POINT_MASS_BASE_MASS = 1.0


def point_mass_reward(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    dist = np.sqrt(np.sum((state[..., :2] - POINT_MASS_GOAL) ** 2, axis=-1))
    return -dist - 0.01 * np.sum(action**2, axis=-1)


def point_mass_dynamics(state: np.ndarray, action: np.ndarray, friction, mass_mult) -> np.ndarray:
    """One Euler step; works on single states or stacked batches."""
    mass = POINT_MASS_BASE_MASS * np.asarray(mass_mult, dtype=float)
    friction = np.asarray(friction, dtype=float)
    if state.ndim == 2:
        mass = np.broadcast_to(mass, state.shape[:1])[:, None]
        friction = np.broadcast_to(friction, state.shape[:1])[:, None]
    pos, vel = state[..., :2], state[..., 2:]
    vel = vel * (1.0 - friction * DT) + (action / mass) * DT
    pos = pos + vel * DT
    return np.concatenate([pos, vel], axis=-1)


# ---------------------------------------------------------------------------
# pendulum (angle measured from upright, hanging start)

PENDULUM_G_OVER_L = 9.81
PENDULUM_MAX_TORQUE = 2.0


def pendulum_observe(theta, theta_dot) -> np.ndarray:
    return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)


def pendulum_reward(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    theta = np.arctan2(state[..., 1], state[..., 0])
    return -(theta**2 + 0.1 * state[..., 2] ** 2 + 0.001 * np.sum(action**2, axis=-1))


def pendulum_dynamics(state: np.ndarray, action: np.ndarray, friction, mass_mult) -> np.ndarray:
    theta = np.arctan2(state[..., 1], state[..., 0])
    theta_dot = state[..., 2]
    torque = PENDULUM_MAX_TORQUE * action[..., 0]
    theta_ddot = PENDULUM_G_OVER_L * np.sin(theta) + torque / np.asarray(mass_mult, dtype=float)
    theta_dot = theta_dot * (1.0 - np.asarray(friction, dtype=float) * DT) + theta_ddot * DT
    theta_dot = np.clip(theta_dot, -8.0, 8.0)
    theta = theta + theta_dot * DT
    theta = (theta + math.pi) % (2 * math.pi) - math.pi
    return pendulum_observe(theta, theta_dot)


PENDULUM_INIT = pendulum_observe(math.pi, 0.0)


# ---------------------------------------------------------------------------


class ContinuousEnv:
    """Single-instance state machine around the pure dynamics functions."""

    def __init__(self, spec: EnvSpec, params: DomainParams, seed: int):
        self.spec = spec
        self.params = params
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self.state: np.ndarray | None = None
        self.t = 0
        self.done = True

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    def initial_state(self) -> np.ndarray:
        if self.spec.family == "point_mass":
            return POINT_MASS_INIT.copy()
        return PENDULUM_INIT.copy()

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(int(seed))
        noise = self._rng.normal(size=self.state_dim)
        self.state = perturb_initial(self.spec.family, self.initial_state(), self.params.noise_scale * noise)
        self.t = 0
        self.done = False
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done or self.state is None:
            raise EpisodeDone("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=float).reshape(self.action_dim)
        if not np.all(np.isfinite(action)):
            raise ValueError(f"action must be finite, got {action}")
        if np.any(np.abs(action) > self.spec.max_action + 1e-12):
            raise ValueError(f"action {action} outside the box [-{self.spec.max_action}, {self.spec.max_action}]")
        reward, nxt = transition(self.spec.family, self.state, action, self.params.friction, self.params.mass_mult)
        self.state = nxt
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return nxt.copy(), float(reward), self.done


def perturb_initial(family: str, init: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if family == "pendulum":
        # noise on angle and angular velocity; keep the observation on the circle
        theta = np.arctan2(init[..., 1], init[..., 0]) + noise[..., 0]
        return pendulum_observe(theta, init[..., 2] + noise[..., 2])
    return init + noise


def transition(family: str, state, action, friction, mass_mult):
    """Reward of (state, action) and the next state."""
    if family == "point_mass":
        return point_mass_reward(state, action), point_mass_dynamics(state, action, friction, mass_mult)
    if family == "pendulum":
        return pendulum_reward(state, action), pendulum_dynamics(state, action, friction, mass_mult)
    raise ValueError(f"no continuous dynamics for family {family!r}")
