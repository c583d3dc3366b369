"""Exact tabular checks of the value-gap, perturbation and weighting bounds.

Everything here works on :class:`~uarl.envs.TabularMDP` instances with a
scalar domain parameter ``phi`` (for slip grids, the slip probability) and
computes fixed points, Wasserstein distances and Lipschitz constants exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from uarl.buffer import weights_from_sigma2
from uarl.envs import TabularMDP, build_slipgrid

TOL = 1e-10


@dataclass
class QTable:
    q: np.ndarray
    gamma: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float)
        if not np.all(np.isfinite(self.q)):
            raise ValueError("Q table must be finite")

    def values(self, policy: np.ndarray) -> np.ndarray:
        return self.q[np.arange(self.q.shape[0]), policy]


def _policy(mdp: TabularMDP, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=int)
    if pi.shape != (mdp.n_states,) or np.any(pi < 0) or np.any(pi >= mdp.n_actions):
        raise ValueError(f"policy must be a length-{mdp.n_states} table of actions in 0..{mdp.n_actions - 1}")
    return pi


def bellman_apply(mdp: TabularMDP, q: np.ndarray, policy) -> np.ndarray:
    """``(T^pi Q)(s, a) = R(s, a) + gamma * sum_s' T(s'|s, a) Q(s', pi(s'))``."""
    pi = _policy(mdp, policy)
    v = q[np.arange(mdp.n_states), pi]
    return mdp.reward + mdp.gamma * mdp.transition @ v


def bellman_optimality_apply(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)


def exact_q(mdp: TabularMDP, policy, tol: float = 1e-12, max_sweeps: int = 10**6) -> QTable:
    """Fixed point of ``T^pi`` by value iteration until the sup-norm step is below ``tol``."""
    pi = _policy(mdp, policy)
    q = np.zeros_like(mdp.reward)
    for _ in range(max_sweeps):
        q_new = bellman_apply(mdp, q, pi)
        if np.max(np.abs(q_new - q)) < tol:
            return QTable(q_new, mdp.gamma, {"mdp": mdp.name, "policy": pi.tolist()})
        q = q_new
    raise RuntimeError(f"value iteration did not converge within {max_sweeps} sweeps")


def policy_q_linear(mdp: TabularMDP, policy) -> np.ndarray:
    """Same fixed point from the linear system ``(I - gamma P_pi) V = R_pi``."""
    pi = _policy(mdp, policy)
    idx = np.arange(mdp.n_states)
    P = mdp.transition[idx, pi]
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, mdp.reward[idx, pi])
    return mdp.reward + mdp.gamma * mdp.transition @ v


def optimal_q(mdp: TabularMDP, tol: float = 1e-12, max_sweeps: int = 10**6) -> np.ndarray:
    q = np.zeros_like(mdp.reward)
    for _ in range(max_sweeps):
        q_new = bellman_optimality_apply(mdp, q)
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise RuntimeError("optimal value iteration did not converge")


def greedy(q: np.ndarray) -> np.ndarray:
    return np.argmax(q, axis=1)


# ---------------------------------------------------------------------------
# Wasserstein distance and Lipschitz constants


def w1_discrete(p, q, ground_metric) -> float:
    """Exact 1-Wasserstein distance between two distributions on a shared finite support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    D = np.asarray(ground_metric, dtype=float)
    n = p.size
    if q.size != n or D.shape != (n, n):
        raise ValueError(f"mismatched support: |p|={p.size}, |q|={q.size}, metric {D.shape}")
    for name, x in (("p", p), ("q", q)):
        if np.any(x < -1e-15) or abs(x.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    if np.array_equal(p, q):
        return 0.0
    # only the supports matter; shrinks the LP considerably
    i = np.flatnonzero(p > 0)
    j = np.flatnonzero(q > 0)
    m, k = i.size, j.size
    cost = D[np.ix_(i, j)].ravel()
    A_eq = np.zeros((m + k, m * k))
    for r in range(m):
        A_eq[r, r * k : (r + 1) * k] = 1.0
    for c in range(k):
        A_eq[m + c, c::k] = 1.0
    b_eq = np.concatenate([p[i], q[j]])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


@dataclass(frozen=True)
class LipschitzReport:
    L_R: float
    L_T: float
    Q_lip: float = 0.0


def _pair_quotients(values: np.ndarray, metric: np.ndarray) -> float:
    diff = np.abs(values[:, None] - values[None, :])
    mask = metric > 0
    if np.any((~mask) & (diff > 0) & ~np.eye(len(values), dtype=bool)):
        raise ValueError("metric is zero between distinct pairs with different values")
    return float(np.max(np.where(mask, diff / np.where(mask, metric, 1.0), 0.0)))


def lipschitz_constants(mdp: TabularMDP, q: QTable | np.ndarray | None = None) -> LipschitzReport:
    """Exact maxima of the reward, transition (W1) and optional Q difference quotients."""
    S, A = mdp.n_states, mdp.n_actions
    M = mdp.metric
    off = ~np.eye(S * A, dtype=bool)
    if np.any(M[off] <= 0):
        raise ValueError("metric must be strictly positive off the diagonal")
    L_R = _pair_quotients(mdp.reward.ravel(), M)
    rows = mdp.transition.reshape(S * A, S)
    dS = mdp.state_metric()
    L_T = 0.0
    for x in range(S * A):
        for y in range(x + 1, S * A):
            if np.array_equal(rows[x], rows[y]):
                continue
            L_T = max(L_T, float(w1_discrete(rows[x], rows[y], dS) / M[x, y]))
    Q_lip = 0.0
    if q is not None:
        qv = q.q if isinstance(q, QTable) else np.asarray(q, dtype=float)
        Q_lip = _pair_quotients(qv.ravel(), M)
    return LipschitzReport(L_R, L_T, Q_lip)


def phi_transition_lipschitz(mdp_a: TabularMDP, mdp_b: TabularMDP, dphi: float) -> float:
    """``max_{s,a} W1(T_a(.|s,a), T_b(.|s,a)) / |dphi|`` on the shared state metric."""
    if dphi == 0:
        return 0.0
    dS = mdp_b.state_metric()
    S, A = mdp_b.n_states, mdp_b.n_actions
    worst = 0.0
    for s in range(S):
        for a in range(A):
            worst = max(worst, w1_discrete(mdp_a.transition[s, a], mdp_b.transition[s, a], dS))
    return worst / abs(dphi)


def _check_shared(m1: TabularMDP, m2: TabularMDP) -> None:
    if m1.reward.shape != m2.reward.shape or not np.array_equal(m1.metric, m2.metric) or m1.gamma != m2.gamma:
        raise ValueError("the two MDPs must share state-action space, metric and discount")


# ---------------------------------------------------------------------------
# certificates


@dataclass
class Certificate:
    check: str
    lhs: float
    rhs: float
    holds: bool | None
    inputs: dict
    details: dict = field(default_factory=dict)
    status: str = "checked"

    @property
    def inputs_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.inputs, sort_keys=True, default=str).encode()).hexdigest()[:16]

    @property
    def counterexample(self) -> dict | None:
        if self.holds is False:
            return {"inputs": self.inputs, "lhs": self.lhs, "rhs": self.rhs, **self.details}
        return None

    def to_dict(self) -> dict:
        d = {"check": self.check, "inputs_digest": self.inputs_digest, "lhs": self.lhs, "rhs": self.rhs,
             "holds": self.holds, "status": self.status, "details": self.details}
        if self.counterexample is not None:
            d["counterexample"] = self.counterexample
        return d


def _bound_constants(mdp_phi: TabularMDP, mdp_t: TabularMDP, q_t: QTable, dphi: float) -> tuple[float, dict]:
    """``L_R + L_T * ||Q||_Lip`` with constants of the phi_t side."""
    lip = lipschitz_constants(mdp_t, q_t)
    L_T_phi = phi_transition_lipschitz(mdp_phi, mdp_t, dphi)
    # the reward is shared, so its phi-Lipschitz constant is zero; L_R is the state-action one
    k = lip.L_R + L_T_phi * lip.Q_lip
    details = {"L_R": lip.L_R, "L_T_phi": L_T_phi, "L_T_state_action": float(lip.L_T), "Q_lip": lip.Q_lip,
               "Q_lip_phi_side": None}
    return k, details


def check_critic_gap(mdp_factory: Callable[[float], TabularMDP], policy, phi: float, phi_t: float) -> Certificate:
    """Lower bound ``||Q_t - Q_phi|| >= gamma (L_R + L_T ||Q||_Lip) / (1 + gamma) |phi_t - phi|``."""
    m, mt = mdp_factory(phi), mdp_factory(phi_t)
    _check_shared(m, mt)
    q, qt = exact_q(m, policy), exact_q(mt, policy)
    dphi = abs(phi_t - phi)
    gap = float(np.max(np.abs(qt.q - q.q)))
    k, details = _bound_constants(m, mt, qt, dphi)
    details["Q_lip_phi_side"] = lipschitz_constants(m, q).Q_lip
    bound = m.gamma * k / (1.0 + m.gamma) * dphi
    return Certificate("critic_gap", gap, bound, bool(gap >= bound - TOL),
                       {"mdp": mt.name, "phi": phi, "phi_t": phi_t, "policy": list(map(int, policy))}, details)


def check_value_error_bound(mdp_factory: Callable[[float], TabularMDP], policy, phi: float, phi_t: float) -> Certificate:
    """Upper bound ``||Q_phi - Q_t|| <= gamma / (1 - gamma) (L_R + L_T ||Q||_Lip) |phi - phi_t|``."""
    m, mt = mdp_factory(phi), mdp_factory(phi_t)
    _check_shared(m, mt)
    q, qt = exact_q(m, policy), exact_q(mt, policy)
    dphi = abs(phi_t - phi)
    gap = float(np.max(np.abs(q.q - qt.q)))
    k, details = _bound_constants(m, mt, qt, dphi)
    details["Q_lip_phi_side"] = lipschitz_constants(m, q).Q_lip
    bound = m.gamma / (1.0 - m.gamma) * k * dphi
    return Certificate("value_error", gap, bound, bool(gap <= bound + TOL),
                       {"mdp": mt.name, "phi": phi, "phi_t": phi_t, "policy": list(map(int, policy))}, details)


def check_operator_perturbation(mdp1: TabularMDP, mdp2: TabularMDP, q: QTable | np.ndarray, policy,
                                phi1: float, phi2: float) -> Certificate:
    """``||T_1 Q - T_2 Q|| <= gamma (L_R + L_T ||Q||_Lip) |phi1 - phi2|`` with constants of ``mdp2``."""
    _check_shared(mdp1, mdp2)
    qv = q.q if isinstance(q, QTable) else np.asarray(q, dtype=float)
    dphi = abs(phi1 - phi2)
    lhs = float(np.max(np.abs(bellman_apply(mdp1, qv, policy) - bellman_apply(mdp2, qv, policy))))
    k, details = _bound_constants(mdp1, mdp2, QTable(qv, mdp2.gamma), dphi)
    if not np.array_equal(mdp1.reward, mdp2.reward):
        raise ValueError("operator perturbation check assumes a reward shared across phi")
    rhs = mdp2.gamma * k * dphi
    return Certificate("operator_perturbation", lhs, rhs, bool(lhs <= rhs + TOL),
                       {"mdp1": mdp1.name, "mdp2": mdp2.name, "phi1": phi1, "phi2": phi2}, details)


# ---------------------------------------------------------------------------
# weighted operator and bias reduction


@dataclass
class TaggedSamples:
    """Tabular transitions ``(s, a, r, phi)``; next states are integrated exactly under ``T_phi``."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    phi: np.ndarray

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=int)
        self.a = np.asarray(self.a, dtype=int)
        self.r = np.asarray(self.r, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        n = len(self.s)
        if not (len(self.a) == len(self.r) == len(self.phi) == n):
            raise ValueError("s, a, r, phi must have equal length")

    def __len__(self) -> int:
        return len(self.s)


def weighted_bellman_apply(samples: TaggedSamples, weights, q: np.ndarray, policy, gamma: float,
                           mdp_factory: Callable[[float], TabularMDP], query=None) -> np.ndarray:
    """Weight-normalized average of ``r + gamma E_{s'~T_phi}[Q(s', pi(s'))]`` per (s, a).

    Normalization runs over the samples at each queried pair. Returns an
    ``(S, A)`` array; entries outside ``query`` are NaN. ``query=None`` asks
    for every pair, so any uncovered pair raises.
    """
    w = np.asarray(weights, dtype=float)
    if len(w) != len(samples):
        raise ValueError("one weight per sample required")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")
    q = np.asarray(q, dtype=float)
    S, A = q.shape
    pi = np.asarray(policy, dtype=int)
    v = q[np.arange(S), pi]
    cache: dict[float, np.ndarray] = {}
    backups = np.empty(len(samples))
    for k in range(len(samples)):
        f = float(samples.phi[k])
        if f not in cache:
            cache[f] = mdp_factory(f).transition
        backups[k] = samples.r[k] + gamma * cache[f][samples.s[k], samples.a[k]] @ v
    num = np.zeros((S, A))
    den = np.zeros((S, A))
    np.add.at(num, (samples.s, samples.a), w * backups)
    np.add.at(den, (samples.s, samples.a), w)
    pairs = [(s, a) for s in range(S) for a in range(A)] if query is None else [tuple(map(int, p)) for p in query]
    out = np.full((S, A), np.nan)
    for s, a in pairs:
        if den[s, a] == 0:
            raise ValueError(f"no sample covers state-action pair ({s}, {a})")
        out[s, a] = num[s, a] / den[s, a]
    return out


def check_bias_reduction(phi, sigma2, phi_t: float, roles="nominal") -> Certificate:
    """``E_w |phi - phi_t| <= E_unif |phi - phi_t| - rho / w_bar`` with ``rho`` the empirical covariance.

    Weights follow the role rule (sigma^2 nominal, 1/sigma^2 repulsive). The
    check is skipped (``holds=None``) when the covariance is not positive.
    """
    phi = np.asarray(phi, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if phi.shape != sigma2.shape or phi.size < 2:
        raise ValueError("need matching phi and sigma2 arrays with at least two samples")
    d = np.abs(phi - phi_t)
    rho = float(np.mean((sigma2 - sigma2.mean()) * (d - d.mean())))
    w = weights_from_sigma2(sigma2, roles)
    w_bar = float(w.mean())
    lhs = float(np.sum(w * d) / np.sum(w))
    e_unif = float(d.mean())
    rhs = e_unif - rho / w_bar
    inputs = {"phi": phi.tolist(), "sigma2": sigma2.tolist(), "phi_t": phi_t,
              "roles": np.broadcast_to(np.asarray(roles), phi.shape).tolist()}
    details = {"rho_hat": rho, "w_bar": w_bar, "e_unif": e_unif, "e_weighted": lhs}
    if rho <= 0:
        return Certificate("bias_reduction", lhs, rhs, None, inputs, details, status="assumption unmet")
    return Certificate("bias_reduction", lhs, rhs, bool(lhs <= rhs + TOL), inputs, details)


# ---------------------------------------------------------------------------
# weighted fitted-Q


def suboptimality(mdp: TabularMDP, policy) -> float:
    """``max_s V*(s) - V^pi(s)`` computed exactly."""
    v_star = optimal_q(mdp).max(axis=1)
    q_pi = policy_q_linear(mdp, policy)
    v_pi = q_pi[np.arange(mdp.n_states), np.asarray(policy, dtype=int)]
    return float(np.max(v_star - v_pi))


def weighted_fitted_q(mdp_factory: Callable[[float], TabularMDP], samples: TaggedSamples, K: int, weights_fn,
                      phi_t: float, gamma: float | None = None) -> tuple[np.ndarray, float]:
    """``K`` rounds of weighted empirical optimality backups; returns the greedy policy and its target suboptimality.

    Regression is exact (tabular), so the only error source is the mixture
    of generating dynamics. ``weights_fn(samples)`` returns one weight per sample.
    """
    target = mdp_factory(phi_t)
    gamma = target.gamma if gamma is None else gamma
    w = np.asarray(weights_fn(samples), dtype=float)
    q = np.zeros_like(target.reward)
    for _ in range(K):
        q = weighted_bellman_apply(samples, w, q, greedy(q), gamma, mdp_factory)
    pi = greedy(q)
    return pi, suboptimality(target, pi)


def uniform_weights(samples: TaggedSamples) -> np.ndarray:
    return np.ones(len(samples))


# ---------------------------------------------------------------------------
# instance generators


def slipgrid_factory(width: int = 2, height: int = 2, gamma: float = 0.9) -> Callable[[float], TabularMDP]:
    return lambda phi: build_slipgrid(width, height, phi, gamma)


def random_mdp_family(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2, gamma: float = 0.9,
                      embed_dim: int = 2) -> Callable[[float], TabularMDP]:
    """Family ``T_phi = (1 - phi) T_a + phi T_b`` with a shared reward and a Euclidean state-action metric."""
    Ta = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    Tb = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    pts = rng.normal(size=(n_states * n_actions, embed_dim))
    M = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 0.0)

    def factory(phi: float) -> TabularMDP:
        T = (1.0 - phi) * Ta + phi * Tb
        T /= T.sum(axis=2, keepdims=True)
        return TabularMDP(T, R, gamma, M, name=f"random{n_states}x{n_actions}-phi{phi:.6g}")

    return factory


def mixed_phi_samples(phis, n_states: int, n_actions: int, reward: np.ndarray, copies: int = 1) -> TaggedSamples:
    """Every (s, a) pair once per phi value (times ``copies``)."""
    s, a, r, f = [], [], [], []
    for phi in phis:
        for _ in range(copies):
            for si in range(n_states):
                for ai in range(n_actions):
                    s.append(si)
                    a.append(ai)
                    r.append(reward[si, ai])
                    f.append(phi)
    return TaggedSamples(np.array(s), np.array(a), np.array(r), np.array(f))


@dataclass(frozen=True)
class MixedPhiScenario:
    factory: Callable[[float], TabularMDP]
    samples: TaggedSamples
    roles: np.ndarray
    sigma2: np.ndarray
    phi_t: float

    def weights(self, samples: TaggedSamples | None = None) -> np.ndarray:
        return weights_from_sigma2(self.sigma2, self.roles)


def mixed_phi_scenario(seed: int = 4, phi_t: float = 0.9, nominal_phis=(0.0, 0.2), repulsive_phis=(0.7, 0.9),
                       sigma2_floor: float = 0.05, sigma2_slope: float = 0.5) -> MixedPhiScenario:
    """Bundled fitted-Q scenario: nominal data far from ``phi_t``, repulsive data near it.

    Per-sample variance grows linearly with ``|phi - phi_t|`` so the variance/bias
    covariance is positive. With the default seed the optimal policy at
    ``phi_t`` differs from the one at the nominal end of the family.
    """
    factory = random_mdp_family(np.random.default_rng(seed), 4, 2, 0.9)
    R = factory(0.0).reward
    S, A = R.shape
    nom = mixed_phi_samples(nominal_phis, S, A, R)
    rep = mixed_phi_samples(repulsive_phis, S, A, R)
    samples = TaggedSamples(np.r_[nom.s, rep.s], np.r_[nom.a, rep.a], np.r_[nom.r, rep.r], np.r_[nom.phi, rep.phi])
    roles = np.array(["nominal"] * len(nom) + ["repulsive"] * len(rep))
    sigma2 = sigma2_floor + sigma2_slope * np.abs(samples.phi - phi_t)
    return MixedPhiScenario(factory, samples, roles, sigma2, phi_t)


SWEEP_CHECKS = ("critic_gap", "operator_perturbation", "value_error")


def random_pair_sweep(check: str, n: int = 100, seed: int = 0, n_states: int = 4, n_actions: int = 2) -> list[Certificate]:
    """Run one certificate over ``n`` random tabular families, each with a random phi pair and policy."""
    if check not in SWEEP_CHECKS:
        raise ValueError(f"unknown sweep check {check!r}; expected one of {SWEEP_CHECKS}")
    certs = []
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)):
        fam = random_mdp_family(rng, n_states, n_actions)
        p1, p2 = (float(x) for x in rng.uniform(0.0, 1.0, 2))
        pol = rng.integers(0, n_actions, n_states)
        if check == "critic_gap":
            certs.append(check_critic_gap(fam, pol, p1, p2))
        elif check == "value_error":
            certs.append(check_value_error_bound(fam, pol, p1, p2))
        else:
            q = rng.normal(size=(n_states, n_actions))
            certs.append(check_operator_perturbation(fam(p1), fam(p2), q, pol, p1, p2))
    return certs


def bias_reduction_constructions(n: int = 50, seed: int = 0, roles="nominal") -> list[Certificate]:
    """Datasets whose sigma^2 is strictly increasing in ``|phi - phi_t|``, checked with the given roles."""
    certs = []
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)):
        m = int(rng.integers(10, 41))
        phi = rng.uniform(0.0, 1.0, m)
        phi_t = float(rng.uniform(0.0, 1.0))
        c0, c1, power = rng.uniform(0.01, 0.1), rng.uniform(0.1, 0.8), rng.uniform(0.5, 2.0)
        sigma2 = c0 + c1 * np.abs(phi - phi_t) ** power
        r = roles(rng, m) if callable(roles) else roles
        certs.append(check_bias_reduction(phi, sigma2, phi_t, r))
    return certs


def certificate_json(certs: list[Certificate]) -> str:
    return json.dumps([c.to_dict() for c in certs], indent=2)

