"""The bridging agent: a Bayesian neural network trained by variational
inference (Bayes by backprop).

The network maps (normalized state, quantile level) to a latency offset.
Every weight and bias carries an independent Gaussian posterior N(mu,
softplus(rho)^2); stochastic forward passes therefore realize a
probabilistic offset A(s). Training minimizes the negative ELBO: a
closed-form KL penalty against the N(0,1) prior plus a Gaussian negative
log likelihood of the z-scored targets under sampled weights.

Everything here is plain numpy with explicit gradients. That keeps training
bitwise deterministic for a seed and makes the gradient computation directly
checkable against finite differences, which is the load-bearing correctness
property of this module.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, TwinbridgeError

TRAIN_LEVELS = tuple(np.linspace(0.025, 0.975, 21))


class TrainingError(TwinbridgeError):
    """Training produced a non-finite or diverging loss."""


class ParamsFormatError(TwinbridgeError):
    """A serialized parameter file is malformed."""


@dataclass(frozen=True)
class BnnArchitecture:
    input_dim: int = 8
    hidden: tuple = (128, 256, 256, 128)
    output_dim: int = 1

    def layer_sizes(self):
        return (self.input_dim,) + tuple(self.hidden) + (self.output_dim,)

    def layer_shapes(self):
        sizes = self.layer_sizes()
        return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())


def _layer_slices(arch: BnnArchitecture):
    """(weight_slice, bias_slice, shape) per layer into the flat vector."""
    out = []
    pos = 0
    for (fi, fo) in arch.layer_shapes():
        w = slice(pos, pos + fi * fo)
        pos += fi * fo
        b = slice(pos, pos + fo)
        pos += fo
        out.append((w, b, (fi, fo)))
    return out


@dataclass(frozen=True)
class VariationalParams:
    """Flat per-parameter posterior (mu, rho); scale = softplus(rho)."""

    arch: BnnArchitecture
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        n = self.arch.param_count()
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise DomainError(f"parameter arrays must have shape ({n},)")

    def posterior_std(self) -> np.ndarray:
        return _softplus(self.rho)

    def astype(self, dtype) -> "VariationalParams":
        return VariationalParams(self.arch, self.mu.astype(dtype),
                                 self.rho.astype(dtype))


@dataclass(frozen=True)
class TargetScaler:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    lr_gamma: float = 0.95
    decay_step: int = 50
    epochs: int = 500
    mc_samples: int = 2
    noise_std: float = 0.1
    prior_std: float = 1.0
    batch_size: int = 512
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.mc_samples < 1:
            raise DomainError("mc_samples must be >= 1")
        if self.noise_std <= 0:
            raise DomainError("noise_std must be positive")


@dataclass(frozen=True)
class TrainedAgent:
    """Trained posterior plus the target scaler it was fitted under."""

    params: VariationalParams
    scaler: TargetScaler
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _softplus(x):
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bnn_init(arch: BnnArchitecture, seed: int) -> VariationalParams:
    """Posterior means ~ N(0, 1/sqrt(fan_in)) per layer, rho = -5
    (initial posterior std softplus(-5), about 0.0067)."""
    rng = np.random.default_rng(seed)
    mu = np.empty(arch.param_count())
    for (w, b, (fi, _)) in _layer_slices(arch):
        std = fi ** -0.5
        mu[w] = rng.normal(0.0, std, size=w.stop - w.start)
        mu[b] = rng.normal(0.0, std, size=b.stop - b.start)
    rho = np.full(arch.param_count(), -5.0)
    return VariationalParams(arch, mu, rho)


def _forward(arch: BnnArchitecture, w_flat: np.ndarray, X: np.ndarray):
    """Weight-space forward pass; returns output and post-activation cache."""
    slices = _layer_slices(arch)
    h = X
    cache = [X]
    for li, (ws, bs, (fi, fo)) in enumerate(slices):
        a = h @ w_flat[ws].reshape(fi, fo) + w_flat[bs]
        h = a if li == len(slices) - 1 else np.tanh(a)
        cache.append(h)
    return h, cache


def _backward(arch: BnnArchitecture, w_flat: np.ndarray, cache, dout: np.ndarray):
    """Gradient of a scalar loss wrt the flat weight vector, given the
    gradient at the network output."""
    slices = _layer_slices(arch)
    grad = np.zeros_like(w_flat)
    delta = dout
    for li in range(len(slices) - 1, -1, -1):
        ws, bs, (fi, fo) = slices[li]
        h_prev = cache[li]
        grad[ws] = (h_prev.T @ delta).reshape(fi * fo)
        grad[bs] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ w_flat[ws].reshape(fi, fo).T) * (1.0 - h_prev * h_prev)
    return grad


def bnn_forward(params: VariationalParams, x, weight_noise) -> float:
    """Single stochastic forward pass: w = mu + softplus(rho) * eps."""
    x = np.asarray(x, dtype=params.mu.dtype)
    if x.shape != (params.arch.input_dim,):
        raise DomainError(f"input must be a {params.arch.input_dim}-vector")
    eps = np.asarray(weight_noise, dtype=params.mu.dtype)
    if eps.shape != params.mu.shape:
        raise DomainError("weight_noise must align with the parameter vector")
    w = params.mu + _softplus(params.rho) * eps
    out, _ = _forward(params.arch, w, x[None, :])
    return float(out[0, 0])


def _kl_to_prior(mu, sigma, prior_std):
    # closed form per parameter: KL(N(mu, sigma^2) || N(0, prior_std^2));
    # a collapsed sigma yields inf, which the training loop turns into an error
    p2 = prior_std * prior_std
    with np.errstate(divide="ignore"):
        return float(np.sum(0.5 * ((mu * mu + sigma * sigma) / p2 - 1.0)
                            - np.log(sigma / prior_std)))


def elbo_loss(params: VariationalParams, inputs, targets, config: TrainConfig,
              weight_noise, kl_weight: float):
    """Negative ELBO for one batch and its gradient over (mu, rho).

    ``weight_noise`` is the frozen standard-normal draw of shape
    (mc_samples, param_count); the loss is deterministic given it, which is
    what makes the finite-difference gradient check meaningful.

    Returns (loss, grad_mu, grad_rho). The batch likelihood term is summed
    over rows, so kl_weight = 1/num_batches recovers the full-dataset ELBO
    across one epoch.
    """
    dtype = params.mu.dtype
    X = np.asarray(inputs, dtype=dtype)
    y = np.asarray(targets, dtype=dtype)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise DomainError(f"inputs must be (batch, {params.arch.input_dim})")
    if y.shape != (X.shape[0],):
        raise DomainError("targets must align with inputs")
    if X.shape[0] == 0:
        raise DomainError("batch must be nonempty")
    eps = np.asarray(weight_noise, dtype=dtype)
    S = eps.shape[0] if eps.ndim == 2 else 1
    eps = eps.reshape(S, params.mu.size)

    sigma = _softplus(params.rho)
    sig_rho = _sigmoid(params.rho)
    noise_var = config.noise_std ** 2
    const = 0.5 * math.log(2.0 * math.pi * noise_var)

    nll = 0.0
    g_w = np.zeros_like(params.mu)
    g_rho_like = np.zeros_like(params.rho)
    for s in range(S):
        w = params.mu + sigma * eps[s]
        out, cache = _forward(params.arch, w, X)
        resid = out[:, 0] - y
        nll += const * y.size + float(resid @ resid) / (2.0 * noise_var)
        dout = (resid / noise_var)[:, None]
        g = _backward(params.arch, w, cache, dout)
        g_w += g
        g_rho_like += g * eps[s]
    nll /= S
    g_w /= S
    g_rho_like /= S

    kl = _kl_to_prior(params.mu, sigma, config.prior_std)
    loss = kl_weight * kl + nll
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")
    p2 = config.prior_std ** 2
    g_mu = g_w + kl_weight * params.mu / p2
    g_rho = g_rho_like * sig_rho + kl_weight * (sigma / p2 - 1.0 / sigma) * sig_rho
    return loss, g_mu, g_rho


def bnn_train(params: VariationalParams, inputs, targets,
              config: TrainConfig = TrainConfig()) -> TrainedAgent:
    """Adadelta training loop with step lr decay; deterministic per seed.

    Targets are z-scored internally; the fitted scaler rides along in the
    result so predictions de-scale back to milliseconds.
    """
    X64 = np.asarray(inputs, dtype=np.float64)
    y64 = np.asarray(targets, dtype=np.float64)
    if X64.ndim != 2 or X64.shape[0] == 0:
        raise DomainError("training set must be a nonempty matrix")
    if y64.shape != (X64.shape[0],):
        raise DomainError("targets must align with inputs")
    t_mean = float(np.mean(y64))
    t_std = float(np.std(y64))
    if t_std < 1e-12:
        t_std = 1.0
    dtype = np.dtype(config.dtype)
    X = X64.astype(dtype)
    z = ((y64 - t_mean) / t_std).astype(dtype)

    p = params.astype(dtype)
    n = X.shape[0]
    batch = min(config.batch_size, n)
    num_batches = (n + batch - 1) // batch
    kl_weight = 1.0 / num_batches

    theta = np.concatenate([p.mu, p.rho])
    half = p.mu.size
    acc_g2 = np.zeros_like(theta)
    acc_dx2 = np.zeros_like(theta)
    decay, tiny = 0.9, 1e-6

    rng = np.random.default_rng(config.seed)
    history = np.empty(config.epochs)
    guard = None
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_gamma ** (epoch // config.decay_step)
        perm = rng.permutation(n)
        total = 0.0
        for b in range(num_batches):
            idx = perm[b * batch:(b + 1) * batch]
            eps = rng.standard_normal((config.mc_samples, half), dtype=dtype)
            cur = VariationalParams(p.arch, theta[:half], theta[half:])
            try:
                loss, g_mu, g_rho = elbo_loss(cur, X[idx], z[idx], config,
                                              eps, kl_weight)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            if guard is None:
                guard = 1e3 * max(abs(loss), 1.0)
            elif loss > guard:
                raise TrainingError(f"epoch {epoch}: loss {loss:.3g} diverged "
                                    f"past {guard:.3g}")
            g = np.concatenate([g_mu, g_rho])
            acc_g2 = decay * acc_g2 + (1.0 - decay) * g * g
            dx = -np.sqrt((acc_dx2 + tiny) / (acc_g2 + tiny)) * g
            acc_dx2 = decay * acc_dx2 + (1.0 - decay) * dx * dx
            theta += lr * dx
            total += loss * idx.size
        history[epoch] = total / n

    trained = VariationalParams(params.arch, theta[:half].astype(np.float64),
                                theta[half:].astype(np.float64))
    return TrainedAgent(trained, TargetScaler(t_mean, t_std), history)


def _local_reparam_forward(params: VariationalParams, X: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """Sample outputs with per-row independent weights.

    Samples each pre-activation from its exact Gaussian law instead of
    materializing a weight draw per row; for independent rows the output
    distribution is identical and the cost is two GEMMs per layer.
    """
    slices = _layer_slices(params.arch)
    sigma2 = params.posterior_std() ** 2
    h = X
    for li, (ws, bs, (fi, fo)) in enumerate(slices):
        m = h @ params.mu[ws].reshape(fi, fo) + params.mu[bs]
        v = (h * h) @ sigma2[ws].reshape(fi, fo) + sigma2[bs]
        a = m + np.sqrt(v) * rng.standard_normal(m.shape)
        h = a if li == len(slices) - 1 else np.tanh(a)
    return h[:, 0]


def predict_offsets(agent: TrainedAgent, state, n: int, seed: int) -> np.ndarray:
    """Draw n offsets (ms) for one state, each from an independent
    (weight draw, quantile level) pair."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    levels = rng.uniform(0.0, 1.0, size=n)
    x = state.normalize() if hasattr(state, "normalize") else np.asarray(state, float)
    X = np.concatenate([np.tile(x, (n, 1)), levels[:, None]], axis=1)
    out = _local_reparam_forward(agent.params, X, rng)
    return out * agent.scaler.std + agent.scaler.mean


def predict_discrepancy(agent: TrainedAgent, state, passes: int = 32,
                        seed: int = 0):
    """Mean/std of the discrepancy regressor over stochastic passes."""
    rng = np.random.default_rng(seed)
    x = state.normalize() if hasattr(state, "normalize") else np.asarray(state, float)
    X = np.concatenate([np.tile(x, (passes, 1)),
                        np.full((passes, 1), 0.5)], axis=1)
    out = _local_reparam_forward(agent.params, X, rng)
    mean = float(np.mean(out)) * agent.scaler.std + agent.scaler.mean
    std = float(np.std(out)) * agent.scaler.std
    return mean, std


MAGIC = b"TWB1"


def save_params(path, params: VariationalParams):
    """Serialize: magic, layer widths (int32 LE), mu then rho (float64 LE)."""
    widths = np.asarray(params.arch.layer_sizes(), dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<i", widths.size))
        fh.write(widths.tobytes())
        fh.write(params.mu.astype("<f8").tobytes())
        fh.write(params.rho.astype("<f8").tobytes())


def load_params(path) -> VariationalParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParamsFormatError("bad magic; not a serialized agent")
    (n_widths,) = struct.unpack_from("<i", blob, 4)
    if n_widths < 2:
        raise ParamsFormatError(f"need at least 2 layer widths, got {n_widths}")
    off = 8
    widths = np.frombuffer(blob, dtype="<i4", count=n_widths, offset=off)
    off += 4 * n_widths
    arch = BnnArchitecture(int(widths[0]), tuple(int(w) for w in widths[1:-1]),
                           int(widths[-1]))
    count = arch.param_count()
    expect = off + 16 * count
    if len(blob) != expect:
        raise ParamsFormatError(f"expected {expect} bytes, file has {len(blob)}")
    mu = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
    rho = np.frombuffer(blob, dtype="<f8", count=count, offset=off + 8 * count).copy()
    return VariationalParams(arch, mu, rho)
