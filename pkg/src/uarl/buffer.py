"""Uncertainty-weighted replay buffer used during fine-tuning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from uarl.data import Batch, Dataset, concat_datasets
from uarl.ensemble import CriticEnsemble, mean_var

SIGMA2_FLOOR = 1e-8


def ensemble_sigma2(ens: CriticEnsemble, s: np.ndarray, a: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Population variance of the member predictions for every (s, a) row."""
    out = np.empty(len(s))
    for lo in range(0, len(s), chunk):
        q = ens.predict(s[lo : lo + chunk], a[lo : lo + chunk])
        out[lo : lo + chunk] = mean_var(q, axis=0).sigma2
    return out


def weights_from_sigma2(sigma2: np.ndarray, roles) -> np.ndarray:
    """sigma^2 for nominal samples, 1/sigma^2 for repulsive ones (after flooring)."""
    sigma2 = np.maximum(np.asarray(sigma2, dtype=float), SIGMA2_FLOOR)
    roles = np.broadcast_to(np.asarray(roles), sigma2.shape)
    bad = ~np.isin(roles, ("nominal", "repulsive"))
    if np.any(bad):
        raise ValueError(f"unknown role(s) for weighting: {sorted(set(roles[bad].tolist()))}")
    return np.where(roles == "repulsive", 1.0 / sigma2, sigma2)


def compute_weights(ens: CriticEnsemble, transitions: Dataset | Batch, roles=None) -> np.ndarray:
    roles = transitions.role if roles is None else roles
    return weights_from_sigma2(ensemble_sigma2(ens, transitions.s, transitions.a), roles)


@dataclass
class BalancedBuffer:
    data: Dataset
    weights: np.ndarray
    sigma2: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.data):
            raise ValueError("one weight per transition required")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("buffer weights must be finite and positive")
        self.probs = self.weights / self.weights.sum()
        self._cdf = np.cumsum(self.probs)

    def __len__(self) -> int:
        return len(self.data)

    @classmethod
    def uniform(cls, data: Dataset) -> BalancedBuffer:
        return cls(data, np.ones(len(data)))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(batch_size) * self._cdf[-1]
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), len(self) - 1)

    def dump_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "sigma2", "weight"])
            sig = self.sigma2 if self.sigma2 is not None else np.full(len(self), np.nan)
            for i, (s2, wt) in enumerate(zip(sig, self.weights)):
                w.writerow([i, repr(float(s2)), repr(float(wt))])


def merge_balanced(datasets: list[Dataset], ens: CriticEnsemble) -> BalancedBuffer:
    """Pool nominal-role datasets and weight every sample by its ensemble variance."""
    if not datasets:
        raise ValueError("merge_balanced needs at least one dataset")
    for d in datasets:
        if d.role != "nominal":
            raise ValueError(f"dataset {d.name!r} has role {d.role!r}; retag absorbed datasets as nominal first")
    pooled = concat_datasets(datasets, "nominal", {"name": "balanced", "sources": [d.name for d in datasets]})
    sigma2 = ensemble_sigma2(ens, pooled.s, pooled.a)
    return BalancedBuffer(pooled, weights_from_sigma2(sigma2, "nominal"), sigma2)


def sample_batch(buffer: BalancedBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    """I.i.d. draws (with replacement) from the normalized weight distribution."""
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    idx = buffer.sample_indices(batch_size, rng)
    return buffer.data.batch(idx, role="nominal")
