"""The bridging loop: alternate cost-aware querying with agent retraining
under a cumulative cost budget, plus the three comparison methods and the
evaluation metrics.

One run proceeds in batches of T querying iterations. Each iteration
samples unobserved candidate states, scores them with cEI under the
current surrogate and alpha, queries the selected state against both
environments, and stores the measured discrepancy. After every complete
batch the bridging agent is retrained from scratch on all residuals
gathered so far and the global discrepancy over a fixed evaluation subset
is recorded; that history drives the alpha controller and the reported
checkpoint curves. The loop stops when the next selected query would
exceed the budget, when the query cap is reached, or when the grid is
exhausted.

Comparison methods share the loop skeleton: L2B-Lite pins alpha to zero
(cost-unaware), GridSearch walks the grid in lexicographic order and
bridges with a per-level GP regressor, and the random baseline picks
uniformly among unobserved states and bridges with ordinary least squares.
"""
from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from .agent import (TRAIN_LEVELS, BnnArchitecture, TrainConfig, TrainedAgent,
                    bnn_init, bnn_train, predict_offsets)
from .bo import (AlphaControllerConfig, KernelConfig, _kernel_matrix, gp_fit,
                 select_kernel_hyperparams, select_next_state, update_alpha)
from .core import (CostModelConfig, DomainError, ExhaustedSpaceError,
                   ExperimentBudget, NetworkState, Observation, StateSpace,
                   enumerate_state_grid, normalize_states, sample_candidates,
                   state_cost)
from .divergence import (KlEstimatorConfig, augment_collection, kl_divergence,
                         quantile_residuals)
from .envs import env_query

_LEVELS = np.asarray(TRAIN_LEVELS)


class Method(enum.Enum):
    L2B = "L2B"
    L2B_LITE = "L2BLite"
    GRID_SEARCH = "GridSearch"
    RANDOM_BASELINE = "RandomBaseline"


def _mix(*parts) -> int:
    # order-sensitive fold of small ints into one 63-bit seed
    h = 0
    for p in parts:
        h = (h * 1_000_003 + int(p)) % (1 << 63)
    return h


@dataclass(frozen=True)
class RunConfig:
    method: Method = Method.L2B
    budget: ExperimentBudget = ExperimentBudget(1700.0, 10)
    eval_state_count: int = 256
    samples_per_query: int = 200
    eval_samples: int = 2000
    stage_eval_samples: int = 500
    max_queries: int = 520
    stage_epochs: int = 25
    seed: int = 0
    kernel: KernelConfig = KernelConfig()
    gp_noise: float = 1e-4
    refit_every: int = 10
    candidate_pool: int = 1024
    alpha: AlphaControllerConfig = AlphaControllerConfig()
    train: TrainConfig = TrainConfig(learning_rate=1.0)
    estimator: KlEstimatorConfig = KlEstimatorConfig()
    cost_model: CostModelConfig = CostModelConfig()
    space: StateSpace = StateSpace()

    def __post_init__(self):
        for name in ("eval_state_count", "samples_per_query", "eval_samples",
                     "stage_eval_samples", "stage_epochs", "candidate_pool"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.max_queries < 0:
            raise DomainError("max_queries must be >= 0 (0 disables the cap)")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    state: NetworkState
    discrepancy: float
    cost: float
    cumulative_cost: float
    alpha: float


@dataclass(frozen=True)
class Checkpoint:
    queries: int
    cumulative_cost: float
    global_discrepancy: float


@dataclass
class RunResult:
    method: Method
    records: list
    pre_global: float
    post_global: float
    eval_states: list
    pre_per_state: np.ndarray
    post_per_state: np.ndarray
    checkpoints: list
    per_traffic: dict
    wall_clock_seconds: float
    exhausted_space: bool = False
    alpha_history: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    bridger: object = None
    discrepancy_agent: TrainedAgent = None

    @property
    def cumulative_cost(self) -> float:
        return self.records[-1].cumulative_cost if self.records else 0.0

    @property
    def reduction_pct(self) -> float:
        if self.pre_global <= 0:
            return 0.0
        return 100.0 * (self.pre_global - self.post_global) / self.pre_global


class NullBridger:
    """No augmentation: evaluation sees the raw simulator output."""

    def offsets(self, state, n, seed):
        return None


class BnnBridger:
    """Offsets drawn from the trained variational agent."""

    def __init__(self, agent: TrainedAgent):
        self.agent = agent

    def offsets(self, state, n, seed):
        return predict_offsets(self.agent, state, n, seed)


class GpResidualBridger:
    """One zero-mean GP per quantile level over queried states, sharing a
    single Cholesky factor; offsets follow the posterior-mean residual curve
    at uniformly drawn levels. The zero prior mean matters: far from every
    queried state the correction decays to nothing, so this bridger only
    knows the regions its method actually visited."""

    def __init__(self, states, residual_matrix, kernel: KernelConfig = KernelConfig(),
                 noise: float = 1e-2):
        R = np.asarray(residual_matrix, dtype=float)  # (n_states, n_levels)
        std = R.std(axis=0)
        std[std < 1e-12] = 1.0
        self.level_std = std
        obs = [Observation(s, 0.0, 1.0, i) for i, s in enumerate(states)]
        self.model = gp_fit(obs, kernel, noise)  # reuse the Cholesky machinery
        self.alphas = cho_solve((self.model.chol, True), R / self.level_std)

    def _residual_curve(self, state):
        x = state.normalize()[None, :]
        ks = _kernel_matrix(self.model.kernel, self.model.inputs, x)[:, 0]
        return (ks @ self.alphas) * self.level_std

    def offsets(self, state, n, seed):
        curve = self._residual_curve(state)
        u = np.random.default_rng(seed).uniform(0.0, 1.0, size=n)
        return np.interp(u, _LEVELS, curve)


class LinearResidualBridger:
    """Ordinary least squares of residuals on (normalized state, level)."""

    def __init__(self, states, residual_matrix):
        X = normalize_states(states)
        R = np.asarray(residual_matrix, dtype=float)
        n_states, n_levels = R.shape
        design = np.concatenate([
            np.ones((n_states * n_levels, 1)),
            np.repeat(X, n_levels, axis=0),
            np.tile(_LEVELS[:, None], (n_states, 1)),
        ], axis=1)
        y = R.reshape(-1)
        self.coef, *_ = np.linalg.lstsq(design, y, rcond=None)

    def offsets(self, state, n, seed):
        u = np.random.default_rng(seed).uniform(0.0, 1.0, size=n)
        x = state.normalize()
        design = np.concatenate([np.ones((n, 1)), np.tile(x, (n, 1)), u[:, None]],
                                axis=1)
        return design @ self.coef


def evaluate_global_discrepancy(bridger, real_env, sim_env, eval_states,
                                estimator: KlEstimatorConfig = KlEstimatorConfig(),
                                n_samples: int = 2000, seed: int = 0) -> float:
    """Mean KL over the evaluation states under the given bridger
    (None or NullBridger for the raw simulator)."""
    per_state = evaluate_per_state(bridger, real_env, sim_env, eval_states,
                                   estimator, n_samples, seed)
    return float(np.mean(per_state))


def evaluate_per_state(bridger, real_env, sim_env, eval_states,
                       estimator: KlEstimatorConfig = KlEstimatorConfig(),
                       n_samples: int = 2000, seed: int = 0) -> np.ndarray:
    if not eval_states:
        raise DomainError("eval_states must be nonempty")
    out = np.empty(len(eval_states))
    for i, s in enumerate(eval_states):
        rc, _ = env_query(real_env, s, n_samples, _mix(seed, i, 0))
        sc, _ = env_query(sim_env, s, n_samples, _mix(seed, i, 1))
        off = None if bridger is None else bridger.offsets(s, n_samples,
                                                           _mix(seed, i, 2))
        if off is None:
            target = sc
        else:
            target = augment_collection(sc, off, seed=_mix(seed, i, 3))
        out[i] = kl_divergence(rc, target, estimator)
    return out


def cost_efficiency(reduced_discrepancy: float, cumulative_cost: float) -> float:
    """Reduced discrepancy per unit of accumulated querying cost."""
    if cumulative_cost <= 0:
        raise DomainError("cumulative_cost must be positive")
    if reduced_discrepancy < 0:
        raise DomainError("reduced_discrepancy must be nonnegative")
    return reduced_discrepancy / cumulative_cost


def per_traffic_breakdown(result: RunResult) -> dict:
    """Per traffic level: (pre, post, reduction %); reduction is None when
    the pre-discrepancy is below estimator noise (nothing to reduce)."""
    traffic = np.array([s.traffic for s in result.eval_states])
    out = {}
    for f in (1, 2, 3, 4):
        mask = traffic == f
        if not np.any(mask):
            warnings.warn(f"traffic level {f} absent from evaluation states")
            continue
        pre = float(np.mean(result.pre_per_state[mask]))
        post = float(np.mean(result.post_per_state[mask]))
        red = None if pre < 0.02 else 100.0 * (pre - post) / pre
        out[f] = (pre, post, red)
    return out


def _residual_dataset(states, residual_rows):
    X = normalize_states(states)
    n_levels = _LEVELS.size
    inputs = np.concatenate([np.repeat(X, n_levels, axis=0),
                             np.tile(_LEVELS[:, None], (len(states), 1))], axis=1)
    targets = np.concatenate(residual_rows)
    return inputs, targets


def _fit_bnn_bridger(states, residual_rows, config: RunConfig, epochs: int,
                     seed: int) -> BnnBridger:
    inputs, targets = _residual_dataset(states, residual_rows)
    train_cfg = replace(config.train, epochs=epochs, seed=seed)
    init = bnn_init(BnnArchitecture(), seed)
    return BnnBridger(bnn_train(init, inputs, targets, train_cfg))


def _fit_bridger(config: RunConfig, states, residual_rows, epochs: int, seed: int):
    if config.method in (Method.L2B, Method.L2B_LITE):
        return _fit_bnn_bridger(states, residual_rows, config, epochs, seed)
    R = np.stack(residual_rows)
    if config.method is Method.GRID_SEARCH:
        return GpResidualBridger(states, R)
    return LinearResidualBridger(states, R)


def _select_cheapest(candidates, costs):
    # no surrogate yet: EI is flat under the prior, so the tie rule decides
    best_i = 0
    best_key = (costs[0], candidates[0].sort_key())
    for i in range(1, len(candidates)):
        key = (costs[i], candidates[i].sort_key())
        if key < best_key:
            best_key, best_i = key, i
    return candidates[best_i]


def run(config: RunConfig, real_env, sim_env) -> RunResult:
    """Execute one full querying-and-bridging run. See the module docstring
    for the loop structure shared by the four methods."""
    t0 = time.perf_counter()
    grid = enumerate_state_grid(config.space)
    n_eval = min(config.eval_state_count, len(grid))
    eval_rng = np.random.default_rng(_mix(config.seed, 0xE7A1))
    eval_states = [grid[i] for i in
                   sorted(eval_rng.choice(len(grid), n_eval, replace=False))]

    pre_per_state = evaluate_per_state(None, real_env, sim_env, eval_states,
                                       config.estimator, config.eval_samples,
                                       seed=_mix(config.seed, 0xE0))
    pre_global = float(np.mean(pre_per_state))

    method = config.method
    bo_method = method in (Method.L2B, Method.L2B_LITE)
    T = config.budget.batch_size
    c_max = config.budget.max_cumulative_cost
    cap = config.max_queries

    observations = []
    residual_rows = []
    queried_states = []
    queried = set()
    records = []
    checkpoints = []
    alpha_history = [pre_global]
    kernel = config.kernel
    gp = None
    cum = 0.0
    it = 0
    stage = 0
    exhausted = False
    grid_cursor = 0  # GridSearch walk position
    stop = False

    while not stop:
        progressed = False
        for _ in range(T):
            if cap and it >= cap:
                stop = True
                break
            if method is Method.L2B:
                alpha = update_alpha(alpha_history, config.alpha)
            else:
                alpha = 0.0
            try:
                if method is Method.GRID_SEARCH:
                    while grid_cursor < len(grid) and grid[grid_cursor] in queried:
                        grid_cursor += 1
                    if grid_cursor >= len(grid):
                        raise ExhaustedSpaceError("grid walk complete")
                    s = grid[grid_cursor]
                elif method is Method.RANDOM_BASELINE:
                    s = sample_candidates(config.space, 1, queried,
                                          seed=_mix(config.seed, 0xC4AD, it))[0]
                else:
                    cands = sample_candidates(config.space, config.candidate_pool,
                                              queried,
                                              seed=_mix(config.seed, 0xC4AD, it))
                    costs = np.array([state_cost(c, config.cost_model)
                                      for c in cands])
                    if gp is None:
                        s = _select_cheapest(cands, costs)
                    else:
                        s = select_next_state(gp, cands, costs, alpha)
            except ExhaustedSpaceError:
                exhausted = True
                stop = True
                break
            cost = state_cost(s, config.cost_model)
            if cum + cost > c_max:
                stop = True
                break
            rc, cost_r = env_query(real_env, s, config.samples_per_query,
                                   _mix(config.seed, 0x9E, it))
            sc, cost_s = env_query(sim_env, s, config.samples_per_query,
                                   _mix(config.seed, 0x9E, it))
            kl = kl_divergence(rc, sc, config.estimator)
            cum += cost_r + cost_s
            it += 1
            observations.append(Observation(s, kl, cost_r, it))
            residual_rows.append(np.array([r for _, r in
                                           quantile_residuals(rc, sc, _LEVELS)]))
            queried_states.append(s)
            queried.add(s)
            records.append(IterationRecord(it, s, kl, cost_r, cum, alpha))
            progressed = True
            if bo_method:
                if len(observations) % config.refit_every == 0:
                    kernel = select_kernel_hyperparams(observations,
                                                       kernel.family,
                                                       config.gp_noise)
                gp = gp_fit(observations, kernel, config.gp_noise)
        if not progressed:
            break
        if not stop:
            stage += 1
            bridger = _fit_bridger(config, queried_states, residual_rows,
                                   config.stage_epochs,
                                   seed=_mix(config.seed, 0xB1, stage))
            g = evaluate_global_discrepancy(bridger, real_env, sim_env,
                                            eval_states, config.estimator,
                                            config.stage_eval_samples,
                                            seed=_mix(config.seed, 0xE5, stage))
            alpha_history.append(g)
            checkpoints.append(Checkpoint(it, cum, g))

    if records:
        final_bridger = _fit_bridger(config, queried_states, residual_rows,
                                     config.train.epochs,
                                     seed=_mix(config.seed, 0xB1, 0xF1))
        post_per_state = evaluate_per_state(final_bridger, real_env, sim_env,
                                            eval_states, config.estimator,
                                            config.eval_samples,
                                            seed=_mix(config.seed, 0xE0))
    else:
        final_bridger = None
        post_per_state = pre_per_state.copy()
    post_global = float(np.mean(post_per_state))

    disc_agent = None
    if bo_method and records:
        X = np.concatenate([normalize_states(queried_states),
                            np.full((len(queried_states), 1), 0.5)], axis=1)
        y = np.array([o.discrepancy for o in observations])
        disc_seed = _mix(config.seed, 0xD15C)
        disc_cfg = replace(config.train, epochs=150, seed=disc_seed)
        disc_agent = bnn_train(bnn_init(BnnArchitecture(), disc_seed), X, y, disc_cfg)

    result = RunResult(
        method=method,
        records=records,
        pre_global=pre_global,
        post_global=post_global,
        eval_states=eval_states,
        pre_per_state=pre_per_state,
        post_per_state=post_per_state,
        checkpoints=checkpoints,
        per_traffic={},
        wall_clock_seconds=time.perf_counter() - t0,
        exhausted_space=exhausted,
        alpha_history=alpha_history,
        observations=observations,
        bridger=final_bridger,
        discrepancy_agent=disc_agent,
    )
    result.per_traffic = per_traffic_breakdown(result)
    return result
