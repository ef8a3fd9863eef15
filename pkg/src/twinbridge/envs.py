"""Real-network and simulator stand-ins.

Two interchangeable environment kinds answer latency queries:

* ``SyntheticEnv``: an analytic pair with a known, state-dependent gap.
  The real role draws lognormal latencies around a rational mean curve;
  the sim role distorts that mean (an MCS-dependent multiplicative error
  plus a constant offset) and under-disperses, the way coarse simulators
  miss instantaneous channel variation.
* ``DatasetEnv``: replays a CSV database of previously collected samples.

Queries against a real-role environment are charged the state's querying
cost; simulator queries are free.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import (CostModelConfig, DomainError, NetworkState, StateSpace,
                   TwinbridgeError, enumerate_state_grid, state_cost)


class Source(enum.Enum):
    REAL = "real"
    SIM = "sim"
    AUGMENTED_SIM = "augmented_sim"


class Role(enum.Enum):
    REAL = "real"
    SIM = "sim"


class DatasetFormatError(TwinbridgeError):
    """The dataset file violates the CSV schema; message carries a line number."""


class UnknownStateError(TwinbridgeError):
    """A dataset environment was asked about a state it does not hold."""


@dataclass(frozen=True)
class PerformanceCollection:
    """An empirical set of end-to-end latency samples for one state."""

    samples: np.ndarray
    state: NetworkState
    source: Source

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", arr)
        if arr.ndim != 1 or arr.size == 0:
            raise DomainError("samples must be a nonempty 1-d sequence")
        if not np.all(arr > 0):
            raise DomainError("every latency sample must be positive")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class SyntheticEnvConfig:
    role: Role
    noise_sigma: float = 0.25
    bias_strength: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise DomainError("noise_sigma must be positive")


@dataclass(frozen=True)
class DatasetRecord:
    state: NetworkState
    real_samples: np.ndarray
    sim_samples: np.ndarray

    def __post_init__(self):
        for name in ("real_samples", "sim_samples"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.size == 0:
                raise DomainError(f"{name} must be a nonempty 1-d sequence")
            if not np.all(arr > 0):
                raise DomainError(f"{name} must contain only positive latencies")


def _state_key(state: NetworkState):
    # integer-encoded, hash-stable across processes (ratios at 1e-6 grain)
    return (state.uplink_bw, state.downlink_bw,
            int(round(state.cpu_ratio * 1_000_000)),
            int(round(state.ram_ratio * 1_000_000)),
            state.mcs_up, state.mcs_down, state.traffic)


def _query_rng(env_seed: int, state: NetworkState, query_seed: int):
    return np.random.default_rng((env_seed & 0xFFFFFFFF, query_seed & 0xFFFFFFFF)
                                 + _state_key(state))


def synthetic_latency_mean(state: NetworkState, config: SyntheticEnvConfig) -> float:
    """Mean end-to-end latency (ms) of the analytic environment.

    The real curve falls with allocated bandwidth, MCS, and compute, and
    scales with traffic. The sim role applies a multiplicative abstraction
    error that grows with the uplink MCS plus a constant offset, so the gap
    is state-dependent rather than uniform.
    """
    u, d = state.uplink_bw, state.downlink_bw
    mu, md, f = state.mcs_up, state.mcs_down, state.traffic
    compute = 0.5 + 2.0 * state.cpu_ratio * state.ram_ratio
    m = 20.0 + f * (400.0 / (1.0 + u * (mu + 1) / 21.0)
                    + 400.0 / (1.0 + d * (md + 1) / 29.0)) / compute
    if config.role is Role.REAL:
        return m
    b = config.bias_strength
    return m * (1.0 - b * mu / 20.0) + 15.0 * b


def _role_sigma(config: SyntheticEnvConfig) -> float:
    # the simulator under-disperses: 40% of the real-world spread
    return config.noise_sigma if config.role is Role.REAL else 0.4 * config.noise_sigma


def synthetic_sample(config: SyntheticEnvConfig, state: NetworkState,
                     n: int, seed: int) -> PerformanceCollection:
    """Draw ``n`` lognormal latencies around the role's mean curve."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    mean = synthetic_latency_mean(state, config)
    sigma = _role_sigma(config)
    rng = _query_rng(config.seed, state, seed)
    samples = mean * np.exp(rng.normal(0.0, sigma, size=n))
    source = Source.REAL if config.role is Role.REAL else Source.SIM
    return PerformanceCollection(samples, state, source)


def synthetic_true_kl(real_cfg: SyntheticEnvConfig, sim_cfg: SyntheticEnvConfig,
                      state: NetworkState) -> float:
    """Closed-form KL between the two lognormal latency laws at one state.

    Both roles are lognormal in the same base variable, so the divergence
    reduces to the Gaussian formula on (log-mean, sigma). Used as ground
    truth in tests and analysis; estimators never see it.
    """
    mr = synthetic_latency_mean(state, real_cfg)
    ms = synthetic_latency_mean(state, sim_cfg)
    sr, ss = _role_sigma(real_cfg), _role_sigma(sim_cfg)
    dmu = math.log(mr) - math.log(ms)
    return math.log(ss / sr) + (sr * sr + dmu * dmu) / (2.0 * ss * ss) - 0.5


class SyntheticEnv:
    """Analytic latency oracle for one role of the synthetic pair."""

    def __init__(self, config: SyntheticEnvConfig, space: StateSpace = StateSpace(),
                 cost_model: CostModelConfig = CostModelConfig()):
        self.config = config
        self.space = space
        self.cost_model = cost_model

    @property
    def role(self) -> Role:
        return self.config.role

    def query(self, state: NetworkState, n_samples: int, seed: int):
        coll = synthetic_sample(self.config, state, n_samples, seed)
        cost = state_cost(state, self.cost_model) if self.role is Role.REAL else 0.0
        return coll, cost


class DatasetEnv:
    """Replays one role of a recorded per-state latency database."""

    def __init__(self, records, role: Role, space: StateSpace = StateSpace(),
                 cost_model: CostModelConfig = CostModelConfig()):
        self.role = role
        self.space = space
        self.cost_model = cost_model
        self._by_state = {_state_key(r.state): r for r in records}

    def query(self, state: NetworkState, n_samples: int, seed: int):
        if n_samples < 1:
            raise DomainError(f"n_samples must be >= 1, got {n_samples}")
        rec = self._by_state.get(_state_key(state))
        if rec is None:
            raise UnknownStateError(f"state {state} not present in the dataset")
        stored = rec.real_samples if self.role is Role.REAL else rec.sim_samples
        if n_samples == stored.size:
            samples = stored.copy()
        elif n_samples < stored.size:
            samples = stored[:n_samples].copy()
        else:
            # top up by resampling with replacement so KL sample counts stay uniform
            rng = _query_rng(0, state, seed)
            extra = rng.choice(stored, size=n_samples - stored.size, replace=True)
            samples = np.concatenate([stored, extra])
        source = Source.REAL if self.role is Role.REAL else Source.SIM
        coll = PerformanceCollection(samples, state, source)
        cost = state_cost(state, self.cost_model) if self.role is Role.REAL else 0.0
        return coll, cost


def env_query(env, state: NetworkState, n_samples: int, seed: int):
    """Query either environment kind: returns (collection, cost)."""
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    return env.query(state, n_samples, seed)


def make_synthetic_pair(space: StateSpace = StateSpace(), bias_strength: float = 0.3,
                        noise_sigma: float = 0.25, seed: int = 0,
                        cost_model: CostModelConfig = CostModelConfig()):
    """Construct the (real, sim) environment pair sharing one state space."""
    real = SyntheticEnv(SyntheticEnvConfig(Role.REAL, noise_sigma, bias_strength,
                                           seed=2 * seed),
                        space, cost_model)
    sim = SyntheticEnv(SyntheticEnvConfig(Role.SIM, noise_sigma, bias_strength,
                                          seed=2 * seed + 1),
                       space, cost_model)
    return real, sim


DATASET_HEADER = ["U", "D", "C", "R", "Mu", "Md", "F", "source", "latency_ms"]


def _parse_row(row, lineno):
    if len(row) != len(DATASET_HEADER):
        raise DatasetFormatError(f"line {lineno}: expected {len(DATASET_HEADER)} "
                                 f"columns, got {len(row)}")
    try:
        state = NetworkState(int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                             int(row[4]), int(row[5]), int(row[6]))
    except (ValueError, DomainError) as exc:
        raise DatasetFormatError(f"line {lineno}: bad state fields: {exc}") from exc
    src = row[7].strip().lower()
    if src not in ("real", "sim"):
        raise DatasetFormatError(f"line {lineno}: source must be real or sim, got {row[7]!r}")
    try:
        latency = float(row[8])
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: bad latency {row[8]!r}") from exc
    if latency <= 0:
        raise DatasetFormatError(f"line {lineno}: latency must be positive, got {latency}")
    return state, src, latency


def load_dataset(path):
    """Parse a dataset CSV into validated records.

    Rows belonging to one state must form a contiguous block (sources may
    interleave inside the block); a state whose block ended and reappears is
    rejected as a duplicate.
    """
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("line 1: missing header") from None
        if header != DATASET_HEADER:
            raise DatasetFormatError(f"line 1: header must be "
                                     f"{','.join(DATASET_HEADER)}")
        seen = set()
        cur_key = None
        cur_state = None
        cur = {"real": [], "sim": []}
        lineno = 1

        def flush(end_line):
            if cur_key is None:
                return
            if not cur["real"] or not cur["sim"]:
                missing = "real" if not cur["real"] else "sim"
                raise DatasetFormatError(f"line {end_line}: state {cur_state} has no "
                                         f"{missing} samples")
            records.append(DatasetRecord(cur_state, np.array(cur["real"]),
                                         np.array(cur["sim"])))
            seen.add(cur_key)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            state, src, latency = _parse_row(row, lineno)
            key = _state_key(state)
            if key != cur_key:
                flush(lineno)
                if key in seen:
                    raise DatasetFormatError(f"line {lineno}: duplicate state {state}")
                cur_key, cur_state = key, state
                cur = {"real": [], "sim": []}
            cur[src].append(latency)
        flush(lineno)
    return records


def save_dataset(records, path):
    """Write records in the dataset CSV schema; load_dataset round-trips it."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_HEADER)
        for rec in records:
            s = rec.state
            prefix = [s.uplink_bw, s.downlink_bw, repr(s.cpu_ratio), repr(s.ram_ratio),
                      s.mcs_up, s.mcs_down, s.traffic]
            for src, arr in (("real", rec.real_samples), ("sim", rec.sim_samples)):
                for x in arr:
                    writer.writerow(prefix + [src, repr(float(x))])
