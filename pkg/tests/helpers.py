from __future__ import annotations

import numpy as np

from uarl.data import Dataset


def toy_dataset(n: int, role: str = "nominal", seed: int = 0, sd: int = 4, ad: int = 2, name: str = "toy") -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, sd)), rng.uniform(-1, 1, (n, ad)), rng.normal(size=n), rng.normal(size=(n, sd)),
                   np.zeros(n, bool), np.tile([0.0, 0.0, 1.0], (n, 1)), np.arange(n) // 5, np.arange(n) % 5, role,
                   {"name": name})


def chi_square_pvalue(buffer_size: int, weights: np.ndarray, draws: int, seed: int) -> float:
    """Goodness of fit of weighted sampling against the normalized weights."""
    from scipy.stats import chisquare

    from uarl.buffer import BalancedBuffer

    buf = BalancedBuffer(toy_dataset(buffer_size), weights)
    idx = buf.sample_indices(draws, np.random.default_rng(seed))
    counts = np.bincount(idx, minlength=buffer_size)
    return float(chisquare(counts, draws * weights / weights.sum()).pvalue)
