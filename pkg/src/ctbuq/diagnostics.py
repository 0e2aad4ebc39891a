"""MCMC quality metrics: autocorrelation, ESS, HPD intervals, chain agreement.

Pure functions over immutable arrays.  The ESS estimator uses Geyer's
initial-positive-sequence truncation on a single chain; HPD sets come from
a sqrt(n)-bin histogram, which keeps them deterministic and lets
multi-modal samples yield unions of disjoint intervals.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "acf",
    "ess",
    "hpd_1d",
    "multi_chain_mean_check",
    "first_decorrelation_lag",
]


def _validate_chain(values: np.ndarray, min_len: int) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim != 1:
        raise ValueError("chain values must be one-dimensional")
    if x.size < min_len:
        raise ValueError(f"chain too short: need >= {min_len} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("chain values must be finite")
    return x


def acf(values, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation ``rho(l)`` for lags 0..max_lag.

    Uses the biased sample autocovariance (divide by n); ``rho(0)`` is
    exactly 1.  Raises for constant chains, whose ACF is undefined.
    """
    x = _validate_chain(values, 2)
    n = x.size
    if not (0 < max_lag < n):
        raise ValueError(f"max_lag must be in [1, {n - 1}], got {max_lag}")
    xc = x - x.mean()
    # FFT-based autocovariance: O(n log n) regardless of max_lag.
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    cov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1] / n
    if cov[0] == 0:
        raise ValueError("ACF undefined for a constant chain")
    rho = cov / cov[0]
    rho[0] = 1.0
    return rho


def ess(values) -> float:
    """Effective sample size ``n / (1 + 2 sum rho(l))``.

    The lag sum is truncated by Geyer's initial positive sequence rule on
    paired lags; the result is clamped to at most ``n``.
    """
    x = _validate_chain(values, 4)
    n = x.size
    rho = acf(x, n - 1)
    tau = 0.0
    m = 0
    while 2 * m + 1 < rho.size:
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        m += 1
    tau -= 1.0
    if tau < 1.0:
        tau = 1.0
    return float(min(n / tau, n))


def first_decorrelation_lag(values, threshold: float = 0.05) -> int | None:
    """First lag with ``|rho| < threshold``; a convenience statistic only."""
    x = _validate_chain(values, 2)
    rho = acf(x, x.size - 1)
    below = np.nonzero(np.abs(rho) < threshold)[0]
    return int(below[0]) if below.size else None


def hpd_1d(samples, level: float) -> list[tuple[float, float]]:
    """Highest-posterior-density set of scalar samples as disjoint intervals.

    The density is a histogram with ``ceil(sqrt(n))`` bins; the set keeps
    the highest-density bins until they hold at least ``level`` of the
    mass, then adjacent kept bins merge into intervals.  Multi-modal
    samples yield several intervals.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 100:
        raise ValueError(f"need at least 100 one-dimensional samples, got shape {x.shape}")
    if not (0 < level < 1):
        raise ValueError(f"level must be in (0, 1), got {level}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return [(lo, hi)]
    n_bins = int(np.ceil(np.sqrt(x.size)))
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    order = np.argsort(-counts, kind="stable")
    cum = np.cumsum(counts[order])
    k = int(np.searchsorted(cum, level * x.size)) + 1
    selected = np.zeros(n_bins, dtype=bool)
    selected[order[:k]] = True

    intervals: list[tuple[float, float]] = []
    start = None
    for i in range(n_bins):
        if selected[i] and start is None:
            start = i
        elif not selected[i] and start is not None:
            intervals.append((float(edges[start]), float(edges[i])))
            start = None
    if start is not None:
        intervals.append((float(edges[start]), float(edges[n_bins])))
    return intervals


def multi_chain_mean_check(curves) -> float:
    """Max pairwise sup-distance between mean curves on a common grid.

    Matching mean curves across independent chains is a necessary
    convergence condition; this returns the worst disagreement.
    """
    arrs = [np.asarray(c, dtype=float) for c in curves]
    if len(arrs) < 2:
        raise ValueError("need at least two chains")
    length = arrs[0].size
    if any(a.ndim != 1 or a.size != length for a in arrs):
        raise ValueError("all curves must be 1-D and share the same grid")
    worst = 0.0
    for i in range(len(arrs)):
        for j in range(i + 1, len(arrs)):
            worst = max(worst, float(np.max(np.abs(arrs[i] - arrs[j]))))
    return worst
