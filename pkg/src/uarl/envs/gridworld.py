"""Finite slip-grid family used for exact (tabular) verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uarl.envs.continuous import EnvSpec, EpisodeDone
from uarl.envs.params import DomainParams

# up, right, down, left
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))
ACTION_NAMES = ("up", "right", "down", "left")


@dataclass
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    metric: np.ndarray  # (S*A, S*A), index s * n_actions + a
    name: str = "mdp"

    def __post_init__(self) -> None:
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.metric = np.asarray(self.metric, dtype=float)
        S, A = self.reward.shape
        if S < 1 or A < 1:
            raise ValueError("TabularMDP needs at least one state and one action")
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every T[s][a] must be a probability vector (sums to 1 within 1e-12)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.metric.shape != (S * A, S * A):
            raise ValueError(f"metric shape {self.metric.shape} != {(S * A, S * A)}")
        if np.any(self.metric < 0) or not np.array_equal(self.metric, self.metric.T):
            raise ValueError("metric must be nonnegative and symmetric")
        if np.any(np.diag(self.metric) != 0):
            raise ValueError("metric must vanish on the diagonal")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def state_metric(self) -> np.ndarray:
        """Ground metric on next states: max state-action distance between two states.

        With it, ``s -> Q(s, pi(s))`` is ``||Q||_Lip``-Lipschitz for every
        deterministic policy, which makes W1 bounds on expectations exact.
        """
        S, A = self.n_states, self.n_actions
        d = self.metric.reshape(S, A, S, A).max(axis=(1, 3))
        np.fill_diagonal(d, 0.0)
        return d


def cell_of(state: int, width: int) -> tuple[int, int]:
    return state % width, state // width


def grid_metric(width: int, height: int, n_actions: int = 4) -> np.ndarray:
    """Manhattan distance between cells plus a unit cost for differing actions."""
    cells = np.array([cell_of(s, width) for s in range(width * height)])
    cell_d = np.abs(cells[:, None, :] - cells[None, :, :]).sum(axis=2)
    act_d = (np.arange(n_actions)[:, None] != np.arange(n_actions)[None, :]).astype(float)
    d = cell_d[:, None, :, None] + act_d[None, :, None, :]
    S = width * height
    return d.reshape(S * n_actions, S * n_actions).astype(float)


def build_slipgrid(width: int, height: int, slip_prob: float, gamma: float = 0.9) -> TabularMDP:
    """Grid world where the intended move succeeds w.p. ``1 - slip_prob``.

    The slip mass is split evenly between the two perpendicular moves; moves
    off the grid leave the agent in place. Reward is 1 in the top-right goal
    cell and 0 elsewhere, independent of ``slip_prob``.
    """
    if int(width) < 1 or int(height) < 1:
        raise ValueError(f"grid dimensions must be positive, got {width}x{height}")
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError(f"slip_prob must lie in [0, 1], got {slip_prob}")
    width, height = int(width), int(height)
    S, A = width * height, 4

    def dest(s: int, move: int) -> int:
        x, y = cell_of(s, width)
        dx, dy = MOVES[move]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return ny * width + nx
        return s

    T = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            T[s, a, dest(s, a)] += 1.0 - slip_prob
            for lateral in ((a + 1) % 4, (a + 3) % 4):
                T[s, a, dest(s, lateral)] += slip_prob / 2.0
    R = np.zeros((S, A))
    R[S - 1, :] = 1.0
    return TabularMDP(T, R, float(gamma), grid_metric(width, height, A), name=f"slipgrid{width}x{height}-slip{slip_prob:g}")


class SlipGridEnv:
    """Sampling front-end for a slip grid; ``noise_scale`` is the slip probability."""

    def __init__(self, spec: EnvSpec, params: DomainParams, seed: int, width: int = 4, height: int = 4):
        if params.noise_scale > 1.0:
            raise ValueError(f"slip_grid uses noise_scale as slip probability; got {params.noise_scale} > 1")
        self.spec = spec
        self.params = params
        self.width, self.height = width, height
        self.mdp = build_slipgrid(width, height, params.noise_scale)
        self._rng = np.random.default_rng(int(seed))
        self.s = 0
        self.t = 0
        self.done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(int(seed))
        self.s, self.t, self.done = 0, 0, False
        return np.array(cell_of(self.s, self.width), dtype=float)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeDone("step() called on a finished episode; call reset() first")
        a = np.asarray(action, dtype=float).reshape(-1)[0]
        if not np.isfinite(a):
            raise ValueError("action must be finite")
        a = int(a)
        if not 0 <= a < 4:
            raise ValueError(f"slip_grid action must be in 0..3, got {a}")
        r = float(self.mdp.reward[self.s, a])
        self.s = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self.s, a]))
        self.t += 1
        self.done = self.t >= self.spec.horizon
        return np.array(cell_of(self.s, self.width), dtype=float), r, self.done
