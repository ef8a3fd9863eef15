"""KL-divergence estimation and offset application.

The objective everywhere is D_KL(real || sim) over per-state latency
collections. Two estimators are provided: a smoothed shared-bin histogram
(the default: deterministic, fast, adequate at a few hundred samples) and a
k-nearest-neighbor estimator kept for cross-validation. Both clamp at zero
since the divergence is nonnegative by definition.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import DomainError
from .envs import PerformanceCollection, Source

MIN_KL_SAMPLES = 50
LATENCY_FLOOR_MS = 0.1


class KlMethod(enum.Enum):
    HISTOGRAM = "histogram"
    KNN = "knn"


@dataclass(frozen=True)
class KlEstimatorConfig:
    method: KlMethod = KlMethod.HISTOGRAM
    bins: int = 64
    smoothing: float = 1e-3
    k: int = 5

    def __post_init__(self):
        if self.bins < 8:
            raise DomainError(f"bins must be >= 8, got {self.bins}")
        if self.smoothing <= 0:
            raise DomainError("smoothing must be positive")
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")


def _as_samples(x) -> np.ndarray:
    if isinstance(x, PerformanceCollection):
        return x.samples
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise DomainError(f"expected 1-d samples, got shape {arr.shape}")
    return arr


def _histogram_kl(p: np.ndarray, q: np.ndarray, bins: int, smoothing: float) -> float:
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if hi <= lo:
        return 0.0  # degenerate shared range: identical point masses
    cp, _ = np.histogram(p, bins=bins, range=(lo, hi))
    cq, _ = np.histogram(q, bins=bins, range=(lo, hi))
    pp = (cp + smoothing) / (p.size + smoothing * bins)
    qq = (cq + smoothing) / (q.size + smoothing * bins)
    return float(np.sum(pp * np.log(pp / qq)))


def _knn_kl(p: np.ndarray, q: np.ndarray, k: int) -> float:
    # Perez-Cruz estimator in one dimension
    n, m = p.size, q.size
    if k >= n:
        raise DomainError(f"k={k} requires more than k samples in p")
    ptree = cKDTree(p[:, None])
    qtree = cKDTree(q[:, None])
    rho = ptree.query(p[:, None], k=k + 1)[0][:, k]   # k-th neighbor, self excluded
    nu = qtree.query(p[:, None], k=k)[0][:, k - 1]
    rho = np.maximum(rho, 1e-12)
    nu = np.maximum(nu, 1e-12)
    return float(np.mean(np.log(nu / rho)) + np.log(m / (n - 1)))


def kl_divergence(p, q, config: KlEstimatorConfig = KlEstimatorConfig()) -> float:
    """Estimate D_KL(p || q) in nats from two sample collections."""
    ps, qs = _as_samples(p), _as_samples(q)
    if ps.size < MIN_KL_SAMPLES or qs.size < MIN_KL_SAMPLES:
        raise DomainError(f"KL estimation needs >= {MIN_KL_SAMPLES} samples per "
                          f"collection, got {ps.size} and {qs.size}")
    if config.method is KlMethod.HISTOGRAM:
        est = _histogram_kl(ps, qs, config.bins, config.smoothing)
    else:
        est = _knn_kl(ps, qs, config.k)
    return max(0.0, est)


def augment_collection(sim: PerformanceCollection, offsets, seed: int = 0) -> PerformanceCollection:
    """Add the probabilistic offsets to simulator samples.

    Offsets are shuffled (seeded) before the element-wise sum so the
    augmented law is the independent convolution of the two empirical
    distributions, not a rank-coupled sum. Results are floored at
    0.1 ms; latency cannot be nonpositive.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (sim.samples.size,):
        raise DomainError(f"need exactly {sim.samples.size} offsets, "
                          f"got shape {offsets.shape}")
    shuffled = offsets.copy()
    np.random.default_rng(seed).shuffle(shuffled)
    out = np.maximum(sim.samples + shuffled, LATENCY_FLOOR_MS)
    return PerformanceCollection(out, sim.state, Source.AUGMENTED_SIM)


def quantile_residuals(real, sim, levels):
    """Per-level difference of empirical quantiles (linear interpolation).

    Returns a list of (level, real_quantile - sim_quantile) pairs; these are
    the bridging agent's regression targets.
    """
    levels = list(levels)
    if not levels:
        raise DomainError("levels must be nonempty")
    arr = np.asarray(levels, dtype=float)
    if np.any(arr <= 0) or np.any(arr >= 1):
        raise DomainError("levels must lie strictly inside (0, 1)")
    if np.any(np.diff(arr) <= 0):
        raise DomainError("levels must be strictly increasing")
    rs, ss = _as_samples(real), _as_samples(sim)
    qr = np.quantile(rs, arr)
    qs = np.quantile(ss, arr)
    return [(float(l), float(a - b)) for l, a, b in zip(arr, qr, qs)]
