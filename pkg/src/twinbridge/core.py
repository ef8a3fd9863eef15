"""State space, cost model, and budget accounting shared by every other module.

A network operating point is a 7-dimensional state: uplink/downlink bandwidth
in PRBs, compute and memory ratios of the core deployment, uplink/downlink
MCS indices, and the number of active traffic users. States live on a finite
grid; all learning components consume the normalized [0,1]^7 representation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class TwinbridgeError(Exception):
    """Base class for errors raised by this package."""


class DomainError(TwinbridgeError, ValueError):
    """A value violates a documented precondition or field range."""


class GridSizeError(TwinbridgeError):
    """A grid enumeration would exceed the configured cap."""


class ExhaustedSpaceError(TwinbridgeError):
    """No unobserved grid states remain; callers should terminate the run."""


# (lower, upper, integral) bounds per state field, in canonical field order.
FIELD_BOUNDS = (
    ("uplink_bw", 0, 50, True),
    ("downlink_bw", 0, 50, True),
    ("cpu_ratio", 0.0, 1.0, False),
    ("ram_ratio", 0.0, 1.0, False),
    ("mcs_up", 0, 20, True),
    ("mcs_down", 0, 28, True),
    ("traffic", 1, 4, True),
)


@dataclass(frozen=True, order=True)
class NetworkState:
    """One configurable operating point of the network.

    Ordering is lexicographic over the fields in declaration order, which is
    also the canonical grid enumeration order.
    """

    uplink_bw: int
    downlink_bw: int
    cpu_ratio: float
    ram_ratio: float
    mcs_up: int
    mcs_down: int
    traffic: int

    def __post_init__(self):
        for (name, lo, hi, integral) in FIELD_BOUNDS:
            v = getattr(self, name)
            if integral and v != int(v):
                raise DomainError(f"{name} must be integral, got {v!r}")
            if not (lo <= v <= hi):
                raise DomainError(f"{name}={v!r} outside [{lo}, {hi}]")

    def normalize(self) -> np.ndarray:
        """Map the state to [0,1]^7 by each field's full type range."""
        out = np.empty(7)
        for i, (name, lo, hi, _) in enumerate(FIELD_BOUNDS):
            out[i] = (getattr(self, name) - lo) / (hi - lo)
        return out

    @staticmethod
    def denormalize(vec) -> "NetworkState":
        """Inverse of :meth:`normalize`; integer fields are rounded.

        Round-trips exactly for every state on any grid.
        """
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (7,):
            raise DomainError(f"expected a 7-vector, got shape {vec.shape}")
        vals = []
        for i, (_, lo, hi, integral) in enumerate(FIELD_BOUNDS):
            v = vec[i] * (hi - lo) + lo
            vals.append(int(round(v)) if integral else float(v))
        return NetworkState(*vals)

    def sort_key(self):
        return (self.uplink_bw, self.downlink_bw, self.cpu_ratio,
                self.ram_ratio, self.mcs_up, self.mcs_down, self.traffic)


def normalize_states(states) -> np.ndarray:
    """Stack normalized representations into an (n, 7) matrix."""
    return np.array([s.normalize() for s in states])


@dataclass(frozen=True)
class DimensionGrid:
    """Inclusive arithmetic progression for one state dimension."""

    lower: float
    upper: float
    stride: float

    def __post_init__(self):
        if self.stride <= 0:
            raise DomainError(f"stride must be positive, got {self.stride}")
        if self.lower > self.upper:
            raise DomainError(f"lower {self.lower} exceeds upper {self.upper}")

    def values(self):
        # float-safe inclusive count; strides never subdivide below 1e-9
        count = int(np.floor((self.upper - self.lower) / self.stride + 1e-9)) + 1
        return [self.lower + i * self.stride for i in range(count)]


def _default_dims():
    return (
        DimensionGrid(0, 50, 10),      # uplink PRBs
        DimensionGrid(0, 50, 10),      # downlink PRBs
        DimensionGrid(0.5, 1.0, 0.5),  # cpu ratio
        DimensionGrid(0.5, 1.0, 0.5),  # ram ratio
        DimensionGrid(10, 20, 10),     # uplink MCS
        DimensionGrid(14, 28, 14),     # downlink MCS
        DimensionGrid(1, 4, 1),        # traffic users
    )


@dataclass(frozen=True)
class StateSpace:
    """Finite search grid: per-dimension bounds and strides.

    The default grid has 6*6*2*2*2*2*4 = 2304 states, a desk-scale stand-in
    for an exhaustive database of a few thousand operating points.
    """

    dims: tuple = field(default_factory=_default_dims)

    def __post_init__(self):
        if len(self.dims) != 7:
            raise DomainError(f"expected 7 dimensions, got {len(self.dims)}")

    def cardinality(self) -> int:
        n = 1
        for d in self.dims:
            n *= len(d.values())
        return n


def enumerate_state_grid(space: StateSpace, max_states: int = 1_000_000):
    """All grid states exactly once, in deterministic lexicographic order."""
    card = space.cardinality()
    if card > max_states:
        raise GridSizeError(f"grid has {card} states, cap is {max_states}")
    per_dim = [d.values() for d in space.dims]
    out = []
    for combo in itertools.product(*per_dim):
        u, dn, c, r, mu, md, f = combo
        out.append(NetworkState(int(u), int(dn), float(c), float(r),
                                int(mu), int(md), int(f)))
    return out


def sample_candidates(space: StateSpace, n: int, exclude, seed: int):
    """Draw up to ``n`` distinct unobserved grid states, reproducibly.

    Raises ExhaustedSpaceError when every grid state is excluded.
    """
    if n <= 0:
        raise DomainError(f"n must be positive, got {n}")
    exclude = set(exclude)
    remaining = [s for s in enumerate_state_grid(space) if s not in exclude]
    if not remaining:
        raise ExhaustedSpaceError("every grid state has been observed")
    if len(remaining) <= n:
        return remaining
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(remaining), size=n, replace=False)
    idx.sort()
    return [remaining[i] for i in idx]


@dataclass(frozen=True)
class CostModelConfig:
    """Linear querying-cost model: base + per-user and per-PRB terms."""

    base_cost: float = 1.0
    per_user_cost: float = 0.5
    per_prb_cost: float = 1.0

    def __post_init__(self):
        fields = (self.base_cost, self.per_user_cost, self.per_prb_cost)
        if any(v < 0 for v in fields):
            raise DomainError("cost weights must be nonnegative")
        if not any(v > 0 for v in fields):
            raise DomainError("at least one cost weight must be positive")


def state_cost(state: NetworkState, config: CostModelConfig = CostModelConfig()) -> float:
    """Querying cost of one state: experiment time grows with connected
    users and with the amount of reconfigured bandwidth."""
    c = (config.base_cost
         + config.per_user_cost * state.traffic
         + config.per_prb_cost * (state.uplink_bw + state.downlink_bw) / 100.0)
    if c <= 0:
        raise DomainError(f"cost model produced non-positive cost {c}")
    return c


@dataclass(frozen=True)
class Observation:
    """One queried tuple recorded by the optimization loop."""

    state: NetworkState
    discrepancy: float
    cost: float
    iteration: int

    def __post_init__(self):
        if self.discrepancy < 0:
            raise DomainError(f"discrepancy must be >= 0, got {self.discrepancy}")
        if self.cost <= 0:
            raise DomainError(f"cost must be positive, got {self.cost}")
        if self.iteration < 0 or self.iteration != int(self.iteration):
            raise DomainError(f"iteration must be a nonnegative integer, got {self.iteration}")


@dataclass(frozen=True)
class ExperimentBudget:
    """Cumulative querying-cost ceiling plus the batch length between
    bridging stages."""

    max_cumulative_cost: float
    batch_size: int = 10

    def __post_init__(self):
        if self.max_cumulative_cost <= 0:
            raise DomainError("max_cumulative_cost must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
