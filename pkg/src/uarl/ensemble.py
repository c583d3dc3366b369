"""Critic ensemble with the Bellman-residual diversity penalty.

Each member is trained on the usual TD loss over nominal data plus
``lam * mean(exp(-res**2 / (2 delta**2)))`` over repulsive data, where
``res = Q_i(s, a) - (r + gamma * Q_i(s', a'))`` uses the member's own online
network on both sides. The penalty is largest when a member is Bellman
consistent on repulsive data, so minimizing it pushes members apart there.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from uarl.data import Batch
from uarl.nn import StackedMLP, flatten_member_grads

log = logging.getLogger(__name__)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> Normalizer:
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, states: np.ndarray, eps: float = 1e-3) -> Normalizer:
        return cls(states.mean(axis=0), states.std(axis=0) + eps)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return (s - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class VarianceStats:
    mu: np.ndarray | float
    sigma2: np.ndarray | float


def mean_var(values, axis: int = 0) -> VarianceStats:
    """Ensemble mean and population (1/N) variance along ``axis``."""
    values = np.asarray(values, dtype=float)
    if values.shape[axis] < 2:
        raise ValueError("need at least two ensemble members")
    # centre on the first member so identical members give exactly zero
    ref = np.take(values, [0], axis=axis)
    dev = values - ref
    shift = dev.mean(axis=axis)
    sigma2 = ((dev - np.expand_dims(shift, axis)) ** 2).mean(axis=axis)
    return VarianceStats(np.squeeze(ref, axis) + shift, sigma2)


class CriticEnsemble:
    def __init__(self, net: StackedMLP, target: StackedMLP, normalizer: Normalizer, state_dim: int, action_dim: int):
        self.net = net
        self.target = target
        self.normalizer = normalizer
        self.state_dim = state_dim
        self.action_dim = action_dim

    @property
    def n_members(self) -> int:
        return self.net.n_members

    def inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([self.normalizer(s), a], axis=-1)

    def q(self, s: np.ndarray, a: np.ndarray, target: bool = False) -> np.ndarray:
        """Q-values of every member, shape ``(N, B)``."""
        net = self.target if target else self.net
        return net(self.inputs(s, a))[..., 0]

    def predict(self, state, action, target: bool = False) -> np.ndarray:
        """Member predictions for one pair (shape ``(N,)``) or a batch (``(N, B)``)."""
        s = np.asarray(state, dtype=float)
        a = np.asarray(action, dtype=float)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
            raise ValueError("predict() received non-finite input")
        single = s.ndim == 1
        s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
        if s2.shape[1] != self.state_dim or a2.shape[1] != self.action_dim:
            raise ValueError(f"expected state dim {self.state_dim} and action dim {self.action_dim}")
        out = self.q(s2, a2, target)
        return out[:, 0] if single else out

    def copy(self) -> CriticEnsemble:
        return CriticEnsemble(self.net.copy(), self.target.copy(), Normalizer(self.normalizer.mean.copy(), self.normalizer.std.copy()),
                              self.state_dim, self.action_dim)

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "normalizer": self.normalizer.to_dict(),
            "online": self.net.to_dict(),
            "target": self.target.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CriticEnsemble:
        return cls(StackedMLP.from_dict(d["online"]), StackedMLP.from_dict(d["target"]), Normalizer.from_dict(d["normalizer"]),
                   int(d["state_dim"]), int(d["action_dim"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> CriticEnsemble:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_ensemble(
    n_members: int,
    seed: int,
    state_dim: int,
    action_dim: int,
    hidden: tuple[int, ...] = (64, 64),
    normalizer: Normalizer | None = None,
) -> CriticEnsemble:
    if n_members < 2:
        raise ValueError(f"an ensemble needs N >= 2 members, got {n_members}")
    rng = np.random.default_rng(seed)
    net = StackedMLP(n_members, state_dim + action_dim, hidden, 1, rng)
    return CriticEnsemble(net, net.copy(), normalizer or Normalizer.identity(state_dim), state_dim, action_dim)


# ---------------------------------------------------------------------------
# losses


def _diversity_terms(residual: np.ndarray, delta: float) -> np.ndarray:
    return np.exp(-(residual**2) / (2.0 * delta**2))


def ensemble_losses(
    ens: CriticEnsemble,
    nominal: Batch | None,
    y: np.ndarray | None,
    repulsive: Batch | None,
    rep_next_actions: np.ndarray | None,
    lam: float,
    delta: float,
    gamma: float,
):
    """Per-member RL and diversity losses with the stacked gradient of their sum.

    Returns ``(rl, div_mean, grads)`` where ``rl`` and ``div_mean`` have one
    entry per member and ``grads`` matches ``ens.net.params``. The member
    objective is ``rl_i + lam * div_mean_i``; members share no parameters, so
    the gradient of the sum splits per member.
    """
    if nominal is not None and len(nominal) == 0:
        raise ValueError("empty nominal batch")
    if repulsive is not None and len(repulsive) == 0:
        raise ValueError("empty repulsive batch")
    N = ens.n_members
    rl = np.zeros(N)
    div = np.zeros(N)
    grads = None
    # nominal and repulsive passes stay separate: with lam == 0 the summed
    # gradient is then bit-identical to the nominal-only one
    if nominal is not None:
        B = len(nominal)
        out, cache = ens.net.forward(ens.inputs(nominal.s, nominal.a))
        err = out[..., 0] - y[None, :]
        rl = np.mean(err**2, axis=1)
        grads, _ = ens.net.backward(cache, (2.0 * err / B)[..., None])
    if repulsive is not None:
        Br = len(repulsive)
        x = np.concatenate([ens.inputs(repulsive.s, repulsive.a), ens.inputs(repulsive.s2, rep_next_actions)], axis=0)
        out, cache = ens.net.forward(x)
        q_sa, q_next = out[:, :Br, 0], out[:, Br:, 0]
        disc = gamma * (1.0 - repulsive.done.astype(float))
        res = q_sa - (repulsive.r[None, :] + disc[None, :] * q_next)
        e = _diversity_terms(res, delta)
        div = e.mean(axis=1)
        # d/dres of lam * mean(e) = -lam * res / delta^2 * e / Br
        dres = -lam * res / delta**2 * e / Br
        dq = np.concatenate([dres, -dres * disc[None, :]], axis=1)
        g_rep, _ = ens.net.backward(cache, dq[..., None])
        grads = g_rep if grads is None else [g + h for g, h in zip(grads, g_rep)]
    return rl, div, grads


def _require_repulsive(batch: Batch) -> None:
    if batch.role != "repulsive":
        raise ValueError(f"diversity term needs a repulsive-role batch, got role {batch.role!r}")


def next_actions(policy, s2: np.ndarray, rng: np.random.Generator | None = None,
                 noise: float = 0.2, noise_clip: float = 0.5, max_action: float = 1.0) -> np.ndarray:
    """Policy action at ``s2`` plus clipped Gaussian smoothing noise (none if ``rng`` is None)."""
    a = policy.mean_action(s2)
    if rng is not None and noise > 0:
        eps = np.clip(noise * rng.normal(size=a.shape), -noise_clip, noise_clip) * max_action
        a = np.clip(a + eps, -max_action, max_action)
    return a


def diversity_loss(
    ens: CriticEnsemble,
    member_index: int,
    repulsive_batch: Batch,
    policy,
    delta: float = 1e-2,
    gamma: float = 0.99,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Summed diversity penalty of one member and its flat gradient."""
    _require_repulsive(repulsive_batch)
    if delta <= 0:
        raise ValueError("delta must be positive")
    a2 = next_actions(policy, repulsive_batch.s2, rng)
    Br = len(repulsive_batch)
    # lam = Br turns the batch mean into the batch sum
    _, div, grads = ensemble_losses(ens, None, None, repulsive_batch, a2, float(Br), delta, gamma)
    return float(div[member_index] * Br), flatten_member_grads(grads, member_index)


def critic_loss(
    ens: CriticEnsemble,
    member_index: int,
    nominal_batch: Batch,
    repulsive_batch: Batch | None,
    policy,
    lam: float,
    delta: float = 1e-2,
    gamma: float = 0.99,
    y: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """TD loss on nominal data plus ``lam`` times the mean diversity term.

    ``y`` defaults to targets from the target networks and the policy's
    next action (see :func:`uarl.agent.td_targets`).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if len(nominal_batch) == 0:
        raise ValueError("empty nominal batch")
    if y is None:
        from uarl.agent import td_targets

        y = td_targets(nominal_batch, policy, ens, gamma, rng=rng)
    a2 = None
    if repulsive_batch is not None:
        _require_repulsive(repulsive_batch)
        a2 = next_actions(policy, repulsive_batch.s2, rng)
    rl, div, grads = ensemble_losses(ens, nominal_batch, y, repulsive_batch, a2, lam, delta, gamma)
    return float(rl[member_index] + lam * div[member_index]), flatten_member_grads(grads, member_index)


def adaptive_lambda(rl_loss: float, div_loss: float, target_fraction: float, previous: float | None = None,
                    lambda_max: float | None = None) -> float:
    """Coefficient making ``lam * div`` the ``target_fraction`` share of ``rl + lam * div``.

    ``lambda_max`` clips the result. Once the members already disagree on the
    repulsive batch the penalty is tiny and the unclipped ratio explodes.
    """
    if not 0.0 <= target_fraction < 1.0:
        raise ValueError("target_fraction must lie in [0, 1)")
    if not (np.isfinite(rl_loss) and np.isfinite(div_loss)):
        raise ValueError("losses must be finite")
    if target_fraction == 0.0:
        return 0.0
    if div_loss <= 0.0:
        return 0.0 if previous is None else previous
    if rl_loss == 0.0:
        log.info("adaptive_lambda: RL loss is zero, lambda set to 0")
        return 0.0
    lam = target_fraction * rl_loss / ((1.0 - target_fraction) * div_loss)
    return lam if lambda_max is None else min(lam, lambda_max)
