"""Monte Carlo estimator containers and standard errors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class EstimatorResult:
    """Scalar or matrix Monte Carlo estimate."""

    value: object
    se: object
    n: int
    seed: Optional[object] = None
    note: str = ""

    def __float__(self):
        return float(self.value)

    def z(self, target=0.0):
        se = np.asarray(self.se, dtype=float)
        diff = np.asarray(self.value, dtype=float) - target
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))

    def within(self, target=0.0, k=3.0, atol=1e-12):
        diff = np.abs(np.asarray(self.value, dtype=float) - target)
        return bool(np.all(diff <= k * np.asarray(self.se, dtype=float) + atol))

    def to_dict(self):
        v = np.asarray(self.value).tolist()
        s = np.asarray(self.se).tolist()
        return {"value": v, "se": s, "n": self.n, "seed": self.seed, "note": self.note}


def mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n == 0:
        raise ValueError("no samples")
    m = x.mean(axis=axis)
    if n < 2:
        return m, np.zeros_like(m)
    return m, x.std(axis=axis, ddof=1) / np.sqrt(n)


def estimate(x, seed=None, note="") -> EstimatorResult:
    m, s = mean_se(x)
    return EstimatorResult(m if np.ndim(m) else float(m), s if np.ndim(s) else float(s), len(x), seed, note)


def batch_means_se(x, n_batches=20):
    """Standard error of the mean from contiguous batch means."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("no samples")
    b = max(2, min(n_batches, n))
    size = n // b
    if size < 1:
        return mean_se(x)
    used = x[: b * size].reshape(b, size, *x.shape[1:]).mean(axis=1)
    return x.mean(axis=0), used.std(axis=0, ddof=1) / np.sqrt(b)


def combined_se(*ses):
    return float(np.sqrt(np.sum(np.square(ses))))
