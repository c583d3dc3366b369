"""Minimal TD3+BC backbone hosting the ensemble critic loss."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from uarl import firewall
from uarl.buffer import BalancedBuffer, sample_batch
from uarl.data import Batch, Dataset, collect_rollouts
from uarl.ensemble import CriticEnsemble, Normalizer, adaptive_lambda, ensemble_losses, init_ensemble, next_actions
from uarl.envs import EnvSpec, ParamRange
from uarl.nn import Adam, StackedMLP

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 256
    polyak: float = 5e-3
    actor_delay: int = 2
    bc_alpha: float = 2.5
    steps: int = 3000
    finetune_steps: int = 1500
    seed: int = 0
    delta: float = 1e-2
    lambda_fraction: float = 0.1
    lambda_every: int = 100
    lambda_max: float | None = 10.0
    lr: float = 3e-4
    n_critics: int = 4
    hidden: tuple[int, ...] = (64, 64)
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    eval_every: int = 1000
    eval_episodes: int = 5

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"TrainConfig.gamma must lie in [0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")
        if not 0.0 < self.polyak <= 1.0:
            raise ValueError(f"TrainConfig.polyak must lie in (0, 1], got {self.polyak}")
        if self.actor_delay < 1:
            raise ValueError("TrainConfig.actor_delay must be >= 1")
        if self.delta <= 0:
            raise ValueError("TrainConfig.delta must be > 0")
        if not 0.0 <= self.lambda_fraction < 1.0:
            raise ValueError("TrainConfig.lambda_fraction must lie in [0, 1)")
        if self.n_critics < 2:
            raise ValueError("TrainConfig.n_critics must be >= 2")
        if self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.lambda_max is not None and self.lambda_max < 0:
            raise ValueError("TrainConfig.lambda_max must be >= 0")
        if self.lr < 0:
            raise ValueError("TrainConfig.lr must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


class Policy:
    """Deterministic actor: tanh output scaled to the action box."""

    def __init__(self, net: StackedMLP, normalizer: Normalizer, max_action: float = 1.0, noise_std: float = 0.1):
        self.net = net
        self.normalizer = normalizer
        self.max_action = max_action
        self.noise_std = noise_std
        self.policy_id = "learned"

    @property
    def action_dim(self) -> int:
        return self.net.sizes[-1]

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        out = self.net(self.normalizer(np.atleast_2d(s)))[0]
        return out[0] if s.ndim == 1 else out

    __call__ = mean_action

    def copy(self) -> Policy:
        p = Policy(self.net.copy(), Normalizer(self.normalizer.mean.copy(), self.normalizer.std.copy()), self.max_action, self.noise_std)
        p.policy_id = self.policy_id
        return p

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "normalizer": self.normalizer.to_dict(), "max_action": self.max_action,
                "noise_std": self.noise_std, "policy_id": self.policy_id}

    @classmethod
    def from_dict(cls, d: dict) -> Policy:
        p = cls(StackedMLP.from_dict(d["net"]), Normalizer.from_dict(d["normalizer"]), d["max_action"], d["noise_std"])
        p.policy_id = d.get("policy_id", "learned")
        return p


def init_policy(state_dim: int, action_dim: int, seed: int, normalizer: Normalizer, hidden=(64, 64),
                max_action: float = 1.0, noise_std: float = 0.1) -> Policy:
    rng = np.random.default_rng(seed)
    net = StackedMLP(1, state_dim, hidden, action_dim, rng, out_activation="tanh", out_scale=max_action)
    return Policy(net, normalizer, max_action, noise_std)


# ---------------------------------------------------------------------------
# update rules


def td_targets(batch: Batch, policy: Policy, ens: CriticEnsemble, gamma: float, rng: np.random.Generator | None = None,
               noise: float = 0.2, noise_clip: float = 0.5) -> np.ndarray:
    """``r + gamma * (1 - done) * min_j Q_target_j(s', pi(s') + clipped noise)``."""
    a2 = next_actions(policy, batch.s2, rng, noise, noise_clip, policy.max_action)
    q_next = ens.q(batch.s2, a2, target=True).min(axis=0)
    return batch.r + gamma * (1.0 - batch.done.astype(float)) * q_next


def soft_update(target: StackedMLP, online: StackedMLP, polyak: float) -> None:
    for t, o in zip(target.params, online.params):
        t *= 1.0 - polyak
        t += polyak * o


def soft_update_targets(ens: CriticEnsemble, polyak: float) -> None:
    if not 0.0 < polyak <= 1.0:
        raise ValueError(f"polyak must lie in (0, 1], got {polyak}")
    soft_update(ens.target, ens.net, polyak)


def actor_loss(policy: Policy, ens: CriticEnsemble, batch: Batch, alpha: float, lam_bc: float | None = None):
    """TD3+BC actor objective ``-lam_bc * mean Q_1(s, pi(s)) + mean (pi(s) - a)^2``.

    ``lam_bc = alpha / mean|Q_1|`` is treated as a constant (no gradient).
    Returns ``(loss, grads, lam_bc, bc_term)``.
    """
    x = policy.normalizer(batch.s)
    pi, a_cache = policy.net.forward(x)
    pi = pi[0]
    q1_net = member_view(ens.net, 0)
    q_out, q_cache = q1_net.forward(ens.inputs(batch.s, pi))
    q1 = q_out[0, :, 0]
    if lam_bc is None:
        lam_bc = alpha / max(np.abs(q1).mean(), 1e-8)
    B = len(batch)
    diff = pi - batch.a
    bc = float(np.mean(diff**2))
    loss = -lam_bc * float(q1.mean()) + bc
    _, dx = q1_net.backward(q_cache, np.full((1, B, 1), -lam_bc / B), need_input_grad=True)
    dpi = dx[0, :, ens.state_dim :] + 2.0 * diff / diff.size
    grads, _ = policy.net.backward(a_cache, dpi[None])
    return loss, grads, lam_bc, bc


def member_view(net: StackedMLP, i: int) -> StackedMLP:
    """Single-member network sharing storage with ``net``."""
    view = StackedMLP(1, net.sizes[0], net.sizes[1:-1], net.sizes[-1], None, net.out_activation, net.out_scale)
    view.params = [p[i : i + 1] for p in net.params]
    return view


@dataclass
class LossReport:
    rl: float
    diversity: float
    lam: float

    @property
    def diversity_contribution(self) -> float:
        return self.lam * self.diversity


class Learner:
    """Mutable training state: networks, optimizers and the current lambda."""

    def __init__(self, policy: Policy, ens: CriticEnsemble, config: TrainConfig, seed_offset: int = 0):
        self.policy = policy
        self.actor_target = policy.net.copy()
        self.ens = ens
        self.config = config
        self.critic_opt = Adam(ens.net.params, lr=config.lr)
        self.actor_opt = Adam(policy.net.params, lr=config.lr)
        self.lam = 0.0
        self.critic_steps = 0
        self.actor_updates = 0
        ss = np.random.SeedSequence([config.seed, seed_offset, 0x5EED])
        streams = ss.spawn(4)
        self.rng_nominal = np.random.default_rng(streams[0])
        self.rng_target_noise = np.random.default_rng(streams[1])
        self.rng_repulsive = np.random.default_rng(streams[2])
        self.rng_rep_noise = np.random.default_rng(streams[3])

    def target_policy(self) -> Policy:
        return Policy(self.actor_target, self.policy.normalizer, self.policy.max_action)

    def update_critics(self, nominal: Batch, repulsive: Batch | None) -> LossReport:
        cfg = self.config
        y = td_targets(nominal, self.target_policy(), self.ens, cfg.gamma, self.rng_target_noise, cfg.policy_noise, cfg.noise_clip)
        a2 = None
        if repulsive is not None:
            a2 = next_actions(self.policy, repulsive.s2, self.rng_rep_noise, cfg.policy_noise, cfg.noise_clip, self.policy.max_action)
            if self.critic_steps % cfg.lambda_every == 0:
                rl0, div0, _ = ensemble_losses(self.ens, nominal, y, repulsive, a2, 0.0, cfg.delta, cfg.gamma)
                self.lam = adaptive_lambda(float(rl0.mean()), float(div0.mean()), cfg.lambda_fraction, self.lam, cfg.lambda_max)
        rl, div, grads = ensemble_losses(self.ens, nominal, y, repulsive, a2, self.lam, cfg.delta, cfg.gamma)
        if not (np.all(np.isfinite(rl)) and np.all(np.isfinite(div))):
            raise TrainingDiverged(f"non-finite critic loss at step {self.critic_steps}: rl={rl}, div={div}")
        self.critic_opt.step(self.ens.net.params, grads)
        self.critic_steps += 1
        return LossReport(float(rl.mean()), float(div.mean()) if repulsive is not None else 0.0, self.lam if repulsive is not None else 0.0)

    def update_actor(self, nominal: Batch) -> float:
        loss, grads, _, _ = actor_loss(self.policy, self.ens, nominal, self.config.bc_alpha)
        self.actor_opt.step(self.policy.net.params, grads)
        self.actor_updates += 1
        return loss

    def soft_update(self) -> None:
        soft_update_targets(self.ens, self.config.polyak)
        soft_update(self.actor_target, self.policy.net, self.config.polyak)


def evaluate_policy(policy, spec: EnvSpec, params_range: ParamRange, n_episodes: int, seed: int = 10_000) -> float:
    """Mean undiscounted return of noise-free rollouts."""
    d = collect_rollouts(spec, params_range, policy, n_episodes, seed, noise_std=0.0, name="eval")
    return float(d.episode_returns().mean())


@dataclass
class TrainResult:
    policy: Policy
    ensemble: CriticEnsemble
    metrics: list[dict] = field(default_factory=list)
    actor_updates: int = 0

    def write_metrics(self, path: str | Path) -> None:
        write_metrics(self.metrics, path)


METRIC_FIELDS = ("step", "rl_loss", "div_loss", "lambda", "eval_return")


def write_metrics(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([row["step"], *(repr(float(row[k])) for k in METRIC_FIELDS[1:])])


def _run_loop(learner: Learner, buffer: BalancedBuffer, repulsive: Dataset | None, steps: int,
              eval_spec: EnvSpec | None, eval_range: ParamRange | None) -> list[dict]:
    cfg = learner.config
    rows = []
    for step in range(steps):
        nominal = sample_batch(buffer, cfg.batch_size, learner.rng_nominal)
        rep = None
        if repulsive is not None:
            idx = learner.rng_repulsive.integers(0, len(repulsive), size=cfg.batch_size)
            rep = repulsive.batch(idx, role="repulsive")
        report = learner.update_critics(nominal, rep)
        if learner.critic_steps % cfg.actor_delay == 0:
            learner.update_actor(nominal)
            learner.soft_update()
        eval_return = float("nan")
        if eval_spec is not None and cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            eval_return = evaluate_policy(learner.policy, eval_spec, eval_range, cfg.eval_episodes)
        rows.append({"step": step, "rl_loss": report.rl, "div_loss": report.diversity, "lambda": report.lam,
                     "eval_return": eval_return})
    return rows


def _env_from(dataset: Dataset) -> tuple[EnvSpec | None, ParamRange | None]:
    env = dataset.provenance.get("env")
    if env is None:
        return None, None
    spec = EnvSpec.from_dict(env)
    nominal = spec.nominal_params
    return spec, ParamRange("mass_mult", nominal.mass_mult, nominal.mass_mult, nominal)


def init_agent(state_dim: int, action_dim: int, normalizer: Normalizer, config: TrainConfig) -> tuple[Policy, CriticEnsemble]:
    ss = np.random.SeedSequence([config.seed, 0xC0FFEE]).spawn(2)
    critic_seed = int(ss[0].generate_state(1)[0])
    actor_seed = int(ss[1].generate_state(1)[0])
    ens = init_ensemble(config.n_critics, critic_seed, state_dim, action_dim, config.hidden, normalizer)
    policy = init_policy(state_dim, action_dim, actor_seed, normalizer, config.hidden, noise_std=config.exploration_noise)
    return policy, ens


def train_offline(nominal: Dataset, repulsive: Dataset | None, config: TrainConfig,
                  eval_spec: EnvSpec | None = None, eval_range: ParamRange | None = None) -> TrainResult:
    """Train policy and critics from scratch on (nominal, repulsive).

    ``repulsive=None`` runs the plain backbone with no diversity term.
    """
    if nominal.role != "nominal":
        raise ValueError(f"train_offline needs a nominal-role dataset, got {nominal.role!r}")
    if repulsive is not None and repulsive.role != "repulsive":
        raise ValueError(f"train_offline needs a repulsive-role dataset, got {repulsive.role!r}")
    with firewall.training_scope("train_offline"):
        normalizer = Normalizer.fit(nominal.s)
        policy, ens = init_agent(nominal.s.shape[1], nominal.a.shape[1], normalizer, config)
        if eval_spec is None:
            eval_spec, eval_range = _env_from(nominal)
        learner = Learner(policy, ens, config)
        rows = _run_loop(learner, BalancedBuffer.uniform(nominal), repulsive, config.steps, eval_spec, eval_range)
    return TrainResult(learner.policy, learner.ens, rows, learner.actor_updates)


def finetune(policy: Policy, ens: CriticEnsemble, balanced_nominal: BalancedBuffer, new_repulsive: Dataset | None,
             config: TrainConfig, steps: int | None = None, seed_offset: int = 1,
             eval_spec: EnvSpec | None = None, eval_range: ParamRange | None = None) -> TrainResult:
    """Continue training copies of ``policy``/``ens`` with weighted nominal sampling.

    Optimizer moments start fresh for every call.
    """
    if len(balanced_nominal) == 0:
        raise ValueError("finetune needs a non-empty buffer")
    if new_repulsive is not None and new_repulsive.role != "repulsive":
        raise ValueError(f"finetune needs a repulsive-role dataset, got {new_repulsive.role!r}")
    with firewall.training_scope("finetune"):
        learner = Learner(policy.copy(), ens.copy(), config, seed_offset)
        rows = _run_loop(learner, balanced_nominal, new_repulsive, config.finetune_steps if steps is None else steps,
                         eval_spec, eval_range)
    return TrainResult(learner.policy, learner.ens, rows, learner.actor_updates)


def save_checkpoint(path: str | Path, policy: Policy, ens: CriticEnsemble, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"policy": policy.to_dict(), "ensemble": ens.to_dict(), **(extra or {})}))


def load_checkpoint(path: str | Path) -> tuple[Policy, CriticEnsemble, dict]:
    d = json.loads(Path(path).read_text())
    extra = {k: v for k, v in d.items() if k not in ("policy", "ensemble")}
    return Policy.from_dict(d["policy"]), CriticEnsemble.from_dict(d["ensemble"]), extra
