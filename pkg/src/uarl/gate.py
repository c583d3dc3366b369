"""Variance-based OOD detection and the deploy/continue decision."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from uarl.buffer import ensemble_sigma2
from uarl.data import Dataset, collect_rollouts
from uarl.ensemble import CriticEnsemble
from uarl.envs import EnvSpec, ParamRange

log = logging.getLogger(__name__)

MIN_ID_SAMPLES = 20
KL_BINS = 16


@dataclass(frozen=True)
class GateConfig:
    percentile: float = 95.0
    alpha: float = 0.05
    mode: str = "percentile"
    tau_kl: float = 0.25
    id_episodes: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError(f"GateConfig.percentile must lie in (0, 100], got {self.percentile}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"GateConfig.alpha must lie in (0, 1), got {self.alpha}")
        if self.mode not in ("percentile", "gaussian"):
            raise ValueError(f"GateConfig.mode must be 'percentile' or 'gaussian', got {self.mode!r}")
        if self.tau_kl < 0:
            raise ValueError("GateConfig.tau_kl must be >= 0")
        if self.id_episodes < MIN_ID_SAMPLES:
            raise ValueError(f"GateConfig.id_episodes must be >= {MIN_ID_SAMPLES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GateConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GateConfig fields: {sorted(unknown)}")
        return cls(**d)


def variance_trace(ens: CriticEnsemble, dataset: Dataset) -> np.ndarray:
    """Per-transition ensemble variance (divisor N)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return ensemble_sigma2(ens, dataset.s, dataset.a)


def episode_means(trace: np.ndarray, ep: np.ndarray) -> np.ndarray:
    episodes = np.unique(ep)
    return np.array([trace[ep == e].mean() for e in episodes])


def threshold_percentile(id_variances, percentile: float = 95.0) -> float:
    """Linearly interpolated order statistic of the ID variances."""
    x = np.asarray(id_variances, dtype=float)
    if x.size < MIN_ID_SAMPLES:
        raise ValueError(f"need at least {MIN_ID_SAMPLES} ID variance samples, got {x.size}")
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    return float(np.percentile(x, percentile))


def threshold_gaussian(sigma_in2: float, n_members: int, alpha: float = 0.05) -> float:
    """``sigma_in2 + z_{1-alpha} * sigma_in / sqrt(N)``."""
    if sigma_in2 <= 0:
        raise ValueError("sigma_in2 must be > 0")
    if n_members < 2:
        raise ValueError("N must be >= 2")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(sigma_in2 + norm.ppf(1.0 - alpha) * np.sqrt(sigma_in2) / np.sqrt(n_members))


def gate_threshold(config: GateConfig, id_variances, n_members: int) -> float:
    if config.mode == "percentile":
        return threshold_percentile(id_variances, config.percentile)
    x = np.asarray(id_variances, dtype=float)
    if x.size < MIN_ID_SAMPLES:
        raise ValueError(f"need at least {MIN_ID_SAMPLES} ID variance samples, got {x.size}")
    return threshold_gaussian(float(x.mean()), n_members, config.alpha)


def id_variances_from_rollouts(ens: CriticEnsemble, spec: EnvSpec, prange: ParamRange, policy, n_episodes: int,
                               seed: int) -> np.ndarray:
    """Mean variance of each of ``n_episodes`` fresh rollouts over the ID range."""
    d = collect_rollouts(spec, prange, policy, n_episodes, seed, name="id_calibration")
    return episode_means(variance_trace(ens, d), d.ep)


@dataclass
class GateReport:
    sigma2_mean: float
    tau: float
    decision: str
    mode: str
    id_variances: np.ndarray
    trace: np.ndarray
    trace_ep: np.ndarray
    trace_t: np.ndarray
    iteration: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = "deploy" if self.sigma2_mean <= self.tau else "continue"
        if self.decision != expected:
            raise ValueError(f"decision {self.decision!r} inconsistent with sigma2_mean={self.sigma2_mean}, tau={self.tau}")

    @property
    def deploy(self) -> bool:
        return self.decision == "deploy"

    @property
    def episode_sigma2(self) -> np.ndarray:
        return episode_means(self.trace, self.trace_ep)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sigma2_mean": self.sigma2_mean,
            "tau": self.tau,
            "decision": self.decision,
            "mode": self.mode,
            "id_variances": self.id_variances.tolist(),
            "episode_sigma2": self.episode_sigma2.tolist(),
            **self.extra,
        }

    def save(self, directory: str | Path, stem: str = "gate") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        with (directory / f"{stem}_trace.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "t", "sigma2"])
            for e, t, v in zip(self.trace_ep, self.trace_t, self.trace):
                w.writerow([int(e), int(t), repr(float(v))])


def decide(sigma2_mean: float, tau: float) -> str:
    return "deploy" if sigma2_mean <= tau else "continue"


def gate_decision(ens: CriticEnsemble, target_proxy: Dataset, config: GateConfig, id_variances,
                  iteration: int = 0) -> GateReport:
    """Deploy iff the mean variance over the target-proxy data is at most tau."""
    if len(target_proxy) == 0:
        raise ValueError("empty target-proxy dataset")
    id_variances = np.asarray(id_variances, dtype=float)
    tau = gate_threshold(config, id_variances, ens.n_members)
    trace = variance_trace(ens, target_proxy)
    sigma2_mean = float(trace.mean())
    return GateReport(sigma2_mean, tau, decide(sigma2_mean, tau), config.mode, id_variances, trace,
                      target_proxy.ep.copy(), target_proxy.t.copy(), iteration)


@dataclass(frozen=True)
class CoverageResult:
    kl: float
    in_coverage: bool
    n_outside: int
    histogram: np.ndarray


def kl_coverage(phi_samples, lo: float, hi: float, tau_kl: float = 0.25, bins: int = KL_BINS) -> CoverageResult:
    """Histogram KL divergence of the samples against the uniform on ``[lo, hi]``.

    Samples outside the range are counted in the boundary bins.
    """
    x = np.asarray(phi_samples, dtype=float).ravel()
    if x.size < 50:
        raise ValueError(f"need at least 50 phi samples, got {x.size}")
    if hi < lo:
        raise ValueError("need lo <= hi")
    n_outside = int(np.count_nonzero((x < lo) | (x > hi)))
    if n_outside:
        log.info("kl_coverage: %d samples outside [%g, %g] counted in boundary bins", n_outside, lo, hi)
    if hi == lo:
        # point mass target: covered iff every sample sits on it
        kl = 0.0 if n_outside == 0 else float("inf")
        hist = np.array([x.size])
    else:
        idx = np.clip(np.floor((x - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
        hist = np.bincount(idx, minlength=bins)
        p = hist / x.size
        nz = p > 0
        kl = float(np.sum(p[nz] * np.log(p[nz] * bins)))
    return CoverageResult(kl, kl <= tau_kl, n_outside, hist)
