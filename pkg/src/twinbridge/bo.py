"""System querying: GP surrogate, expected improvement, cost-aware cEI.

The surrogate models the discrepancy f(s) = D_KL(real(s) || sim(s)) over
normalized states. Targets are z-scored before fitting (zero-mean prior,
scale-free hyperparameters) and de-standardized on prediction. The
acquisition is EI discounted by querying cost, cEI(s) = EI(s) / c(s)^alpha,
with alpha adapted to the recent rate of global-discrepancy decrease: fast
progress pushes alpha up (spend carefully, exploit), stalls pull it down
(explore regardless of cost).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr

from .core import DomainError, ExhaustedSpaceError, TwinbridgeError, normalize_states

_SQRT5 = math.sqrt(5.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalError(TwinbridgeError):
    """Linear algebra failed even after jitter escalation."""


class KernelFamily(enum.Enum):
    RBF = "rbf"
    MATERN25 = "matern25"


@dataclass(frozen=True)
class KernelConfig:
    family: KernelFamily = KernelFamily.RBF
    signal_variance: float = 1.0
    length_scale: float = 0.3

    def __post_init__(self):
        if self.signal_variance <= 0:
            raise DomainError("signal_variance must be positive")
        if self.length_scale <= 0:
            raise DomainError("length_scale must be positive")


def _kernel_from_r2(config: KernelConfig, r2: np.ndarray) -> np.ndarray:
    l2 = config.length_scale ** 2
    if config.family is KernelFamily.RBF:
        return config.signal_variance * np.exp(-r2 / (2.0 * l2))
    r = np.sqrt(np.maximum(r2, 0.0))
    t = _SQRT5 * r / config.length_scale
    return config.signal_variance * (1.0 + t + 5.0 * r2 / (3.0 * l2)) * np.exp(-t)


def kernel_eval(config: KernelConfig, x, y) -> float:
    """Covariance between two normalized states."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r2 = float(np.sum((x - y) ** 2))
    return float(_kernel_from_r2(config, np.array(r2)))


def _kernel_matrix(config: KernelConfig, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return _kernel_from_r2(config, np.sum(d * d, axis=-1))


@dataclass(frozen=True)
class GPModel:
    kernel: KernelConfig
    inputs: np.ndarray          # (n, 7) normalized states
    targets: np.ndarray         # raw discrepancy values, length n
    noise_variance: float
    chol: np.ndarray            # lower Cholesky factor of K + noise*I
    alpha_vec: np.ndarray       # solves (K + noise*I) alpha = z-scored targets
    target_mean: float
    target_std: float

    @property
    def best_observed(self) -> float:
        return float(np.max(self.targets))


def _zscore(targets: np.ndarray):
    mean = float(np.mean(targets))
    std = float(np.std(targets))
    if std < 1e-12:
        std = 1.0  # constant targets degenerate to the prior mean
    return (targets - mean) / std, mean, std


JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def gp_fit(observations, kernel: KernelConfig, noise_variance: float = 1e-4) -> GPModel:
    """Fit the surrogate to the observation store via Cholesky."""
    if not observations:
        raise DomainError("gp_fit needs at least one observation")
    states = [o.state for o in observations]
    if len(set(states)) != len(states):
        raise DomainError("duplicate states in the observation store")
    X = normalize_states(states)
    y = np.array([o.discrepancy for o in observations], dtype=float)
    z, mean, std = _zscore(y)
    K = _kernel_matrix(kernel, X, X)
    n = K.shape[0]
    last_exc = None
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + (noise_variance + jitter) * np.eye(n))
        except np.linalg.LinAlgError as exc:
            last_exc = exc
            continue
        alpha = cho_solve((L, True), z)
        return GPModel(kernel, X, y, noise_variance + jitter, L, alpha, mean, std)
    raise NumericalError(f"Cholesky failed after jitter escalation up to "
                         f"{JITTERS[-1]}") from last_exc


def _posterior_arrays(model: GPModel, Xq: np.ndarray):
    Ks = _kernel_matrix(model.kernel, model.inputs, Xq)      # (n, q)
    mean_z = Ks.T @ model.alpha_vec
    v = solve_triangular(model.chol, Ks, lower=True)
    prior_var = model.kernel.signal_variance
    var_z = np.maximum(prior_var - np.sum(v * v, axis=0), 0.0)
    mean = mean_z * model.target_std + model.target_mean
    var = var_z * model.target_std ** 2
    return mean, var


def gp_posterior(model: GPModel, s) -> tuple:
    """Predictive (mean, variance) at one state; accepts a NetworkState or
    an already-normalized 7-vector."""
    if hasattr(s, "normalize"):
        x = s.normalize()
    else:
        x = np.asarray(s, dtype=float)
    mean, var = _posterior_arrays(model, x[None, :])
    return float(mean[0]), float(var[0])


def log_marginal_likelihood(observations, kernel: KernelConfig,
                            noise_variance: float = 1e-4) -> float:
    """Marginal likelihood of the z-scored targets under the kernel."""
    model = gp_fit(observations, kernel, noise_variance)
    z = (model.targets - model.target_mean) / model.target_std
    n = z.size
    return float(-0.5 * z @ model.alpha_vec
                 - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * n * math.log(2.0 * math.pi))


SIGNAL_GRID = np.logspace(-1.0, 1.0, 8)       # z-scored targets: sigma^2 near 1
LENGTH_GRID = np.logspace(math.log10(0.05), math.log10(2.0), 8)


def select_kernel_hyperparams(observations, family: KernelFamily,
                              noise_variance: float = 1e-4) -> KernelConfig:
    """Pick (signal variance, length scale) on a fixed 8x8 log-grid by
    maximizing the marginal likelihood. Ties resolve to the first grid
    point, so the choice is deterministic."""
    best_cfg = None
    best_lml = -np.inf
    for s2 in SIGNAL_GRID:
        for l in LENGTH_GRID:
            cfg = KernelConfig(family, float(s2), float(l))
            try:
                lml = log_marginal_likelihood(observations, cfg, noise_variance)
            except NumericalError:
                continue
            if lml > best_lml:
                best_lml, best_cfg = lml, cfg
    if best_cfg is None:
        raise NumericalError("no hyperparameter candidate produced a stable fit")
    return best_cfg


def expected_improvement(mean, std, best):
    """Standard maximization EI over the incumbent ``best``.

    Accepts scalars or aligned arrays. With std 0 this is the hard
    improvement max(mean - best, 0).
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise DomainError("std must be nonnegative")
    scalar = mean.ndim == 0 and std.ndim == 0
    mean, std = np.atleast_1d(mean), np.atleast_1d(std)
    diff = mean - best
    out = np.maximum(diff, 0.0)
    pos = std > 0
    if np.any(pos):
        # subnormal std makes z overflow to inf; ndtr/exp handle that limit
        with np.errstate(over="ignore"):
            z = diff[pos] / std[pos]
            phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        out_pos = diff[pos] * ndtr(z) + std[pos] * phi
        out = out.copy()
        out[pos] = np.maximum(out_pos, 0.0)
    return float(out[0]) if scalar else out


def cost_aware_ei(ei, cost, alpha: float):
    """cEI = EI / cost^alpha; alpha in [0,1] sets the cost sensitivity."""
    cost_arr = np.asarray(cost, dtype=float)
    if np.any(cost_arr <= 0):
        raise DomainError("cost must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0,1], got {alpha}")
    out = np.asarray(ei, dtype=float) / cost_arr ** alpha
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AlphaControllerConfig:
    window: int = 5
    reference_rate: float = 0.1
    alpha_min: float = 0.2
    # 0.6 keeps selection close to the pure acquisition ranking; pushing the
    # ceiling toward 1 loses more discrepancy reduction than it saves in cost
    alpha_max: float = 0.6

    def __post_init__(self):
        if self.window < 1:
            raise DomainError("window must be >= 1")
        if self.reference_rate <= 0:
            raise DomainError("reference_rate must be positive")
        if not (0.0 <= self.alpha_min <= self.alpha_max <= 1.0):
            raise DomainError("need 0 <= alpha_min <= alpha_max <= 1")


def update_alpha(recent_global_discrepancy, config: AlphaControllerConfig) -> float:
    """Map the windowed relative decrease rate of global discrepancy onto
    [alpha_min, alpha_max]. Cold start (fewer than two full windows of
    history) stays at alpha_min."""
    hist = list(recent_global_discrepancy)
    w = config.window
    if len(hist) < 2 * w:
        return config.alpha_min
    tail = hist[-2 * w:]
    first = float(np.mean(tail[:w]))
    second = float(np.mean(tail[w:]))
    r = (first - second) / max(first, 1e-12)
    alpha = config.alpha_min + (config.alpha_max - config.alpha_min) * r / config.reference_rate
    return float(min(max(alpha, config.alpha_min), config.alpha_max))


def select_next_state(model: GPModel, candidates, costs, alpha: float):
    """Argmax of cEI over the candidates.

    Ties break toward the lowest cost and then the lexicographically
    smallest state, so the selection is independent of candidate order.
    """
    candidates = list(candidates)
    if not candidates:
        raise ExhaustedSpaceError("no candidates to select from")
    costs = np.asarray(costs, dtype=float)
    if costs.shape != (len(candidates),):
        raise DomainError("costs must align with candidates")
    mean, var = _posterior_arrays(model, normalize_states(candidates))
    ei = expected_improvement(mean, np.sqrt(var), model.best_observed)
    cei = cost_aware_ei(ei, costs, alpha)
    top = np.max(cei)
    best_i = None
    best_key = None
    for i in np.flatnonzero(cei == top):
        key = (costs[i], candidates[i].sort_key())
        if best_key is None or key < best_key:
            best_key, best_i = key, int(i)
    return candidates[best_i]
