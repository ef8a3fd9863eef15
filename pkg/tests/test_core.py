import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinbridge.core import (CostModelConfig, DimensionGrid, DomainError,
                             ExhaustedSpaceError, ExperimentBudget,
                             GridSizeError, NetworkState, Observation,
                             StateSpace, enumerate_state_grid,
                             normalize_states, sample_candidates, state_cost)

DEFAULT_COST = CostModelConfig(1.0, 0.5, 1.0)


def grid_states():
    """Hypothesis strategy over valid states on the default grid."""
    return st.builds(
        NetworkState,
        st.sampled_from([0, 10, 20, 30, 40, 50]),
        st.sampled_from([0, 10, 20, 30, 40, 50]),
        st.sampled_from([0.5, 1.0]),
        st.sampled_from([0.5, 1.0]),
        st.sampled_from([10, 20]),
        st.sampled_from([14, 28]),
        st.sampled_from([1, 2, 3, 4]),
    )


class TestStateCost:
    def test_pinned_mid_state(self):
        s = NetworkState(10, 10, 0.5, 0.5, 10, 14, 2)
        assert state_cost(s, DEFAULT_COST) == pytest.approx(2.2, abs=1e-12)

    def test_pinned_minimal_state(self):
        s = NetworkState(0, 0, 0.5, 0.5, 10, 14, 1)
        assert state_cost(s, DEFAULT_COST) == pytest.approx(1.5, abs=1e-12)

    def test_pinned_maximal_state(self):
        s = NetworkState(50, 50, 1.0, 1.0, 20, 28, 4)
        assert state_cost(s, DEFAULT_COST) == pytest.approx(4.0, abs=1e-12)

    @given(grid_states(), grid_states())
    def test_monotone_in_traffic_and_bandwidth(self, a, b):
        # dominance in (F, U, D) implies cost ordering for nonneg weights
        if (a.traffic <= b.traffic and a.uplink_bw <= b.uplink_bw
                and a.downlink_bw <= b.downlink_bw):
            assert state_cost(a, DEFAULT_COST) <= state_cost(b, DEFAULT_COST)

    @given(grid_states())
    def test_always_positive(self, s):
        assert state_cost(s, DEFAULT_COST) > 0

    def test_rejects_negative_weight(self):
        with pytest.raises(DomainError):
            CostModelConfig(base_cost=-0.1)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(DomainError):
            CostModelConfig(0.0, 0.0, 0.0)


class TestNetworkState:
    def test_field_range_enforced(self):
        with pytest.raises(DomainError):
            NetworkState(60, 0, 0.5, 0.5, 10, 14, 1)
        with pytest.raises(DomainError):
            NetworkState(0, 0, 1.5, 0.5, 10, 14, 1)
        with pytest.raises(DomainError):
            NetworkState(0, 0, 0.5, 0.5, 10, 14, 0)
        with pytest.raises(DomainError):
            NetworkState(0, 0, 0.5, 0.5, 25, 14, 1)

    def test_integral_fields_enforced(self):
        with pytest.raises(DomainError):
            NetworkState(10.5, 0, 0.5, 0.5, 10, 14, 1)

    @given(grid_states())
    def test_normalize_range(self, s):
        v = s.normalize()
        assert v.shape == (7,)
        assert np.all(v >= 0) and np.all(v <= 1)

    @given(grid_states())
    def test_normalize_round_trip_exact(self, s):
        assert NetworkState.denormalize(s.normalize()) == s

    def test_denormalize_shape_check(self):
        with pytest.raises(DomainError):
            NetworkState.denormalize(np.zeros(6))

    def test_ordering_matches_sort_key(self):
        a = NetworkState(0, 10, 0.5, 0.5, 10, 14, 1)
        b = NetworkState(0, 10, 0.5, 0.5, 10, 14, 2)
        assert a < b
        assert a.sort_key() < b.sort_key()

    def test_normalize_states_stacks(self):
        states = [NetworkState(0, 0, 0.5, 0.5, 10, 14, 1),
                  NetworkState(50, 50, 1.0, 1.0, 20, 28, 4)]
        m = normalize_states(states)
        assert m.shape == (2, 7)
        np.testing.assert_array_equal(m[1], np.array([1, 1, 1, 1, 1, 1, 1.0]))


class TestGrid:
    def test_default_cardinality(self):
        space = StateSpace()
        assert space.cardinality() == 2304
        assert len(enumerate_state_grid(space)) == 2304

    def test_no_duplicates_and_all_valid(self):
        states = enumerate_state_grid(StateSpace())
        assert len(set(states)) == len(states)
        # construction already runs validation; spot-check bounds anyway
        for s in states[::97]:
            assert 0 <= s.uplink_bw <= 50
            assert s.traffic in (1, 2, 3, 4)

    def test_lexicographic_order(self):
        states = enumerate_state_grid(StateSpace())
        keys = [s.sort_key() for s in states]
        assert keys == sorted(keys)

    def test_single_point_space(self):
        dims = tuple(DimensionGrid(v, v, 1) for v in (0, 0, 0.5, 0.5, 10, 14, 1))
        assert len(enumerate_state_grid(StateSpace(dims))) == 1

    def test_stride_cardinality_proportionality(self):
        base = StateSpace()
        coarse_dims = (DimensionGrid(0, 50, 50),) + base.dims[1:]
        coarse = StateSpace(coarse_dims)
        # U drops from 6 points to 2: cardinality shrinks by exactly 3x
        assert base.cardinality() == 3 * coarse.cardinality()

    def test_cardinality_cap(self):
        with pytest.raises(GridSizeError):
            enumerate_state_grid(StateSpace(), max_states=10)

    def test_dimension_grid_validation(self):
        with pytest.raises(DomainError):
            DimensionGrid(0, 10, 0)
        with pytest.raises(DomainError):
            DimensionGrid(10, 0, 1)

    def test_space_needs_seven_dims(self):
        with pytest.raises(DomainError):
            StateSpace((DimensionGrid(0, 1, 1),))


class TestSampleCandidates:
    def small_space(self):
        dims = (DimensionGrid(0, 50, 50), DimensionGrid(0, 0, 1),
                DimensionGrid(0.5, 0.5, 1), DimensionGrid(0.5, 0.5, 1),
                DimensionGrid(10, 10, 1), DimensionGrid(14, 14, 1),
                DimensionGrid(1, 4, 1))
        return StateSpace(dims)  # 2 * 4 = 8 states

    def test_distinct_unexcluded(self):
        space = self.small_space()
        out = sample_candidates(space, 5, set(), seed=1)
        assert len(out) == 5
        assert len(set(out)) == 5

    def test_exclusion_respected(self):
        space = self.small_space()
        grid = enumerate_state_grid(space)
        exclude = set(grid[:4])
        out = sample_candidates(space, 8, exclude, seed=1)
        assert set(out) == set(grid[4:])

    def test_exhausted_space(self):
        space = self.small_space()
        with pytest.raises(ExhaustedSpaceError):
            sample_candidates(space, 1, set(enumerate_state_grid(space)), seed=0)

    def test_seed_determinism(self):
        space = StateSpace()
        a = sample_candidates(space, 20, set(), seed=42)
        b = sample_candidates(space, 20, set(), seed=42)
        assert a == b
        c = sample_candidates(space, 20, set(), seed=43)
        assert a != c

    def test_rejects_nonpositive_n(self):
        with pytest.raises(DomainError):
            sample_candidates(StateSpace(), 0, set(), seed=0)


class TestRecords:
    def state(self):
        return NetworkState(0, 0, 0.5, 0.5, 10, 14, 1)

    def test_observation_validation(self):
        Observation(self.state(), 0.0, 1.5, 0)
        with pytest.raises(DomainError):
            Observation(self.state(), -0.1, 1.5, 0)
        with pytest.raises(DomainError):
            Observation(self.state(), 0.1, 0.0, 0)
        with pytest.raises(DomainError):
            Observation(self.state(), 0.1, 1.5, -1)

    def test_budget_validation(self):
        ExperimentBudget(1.0, 1)
        with pytest.raises(DomainError):
            ExperimentBudget(0.0, 1)
        with pytest.raises(DomainError):
            ExperimentBudget(1.0, 0)
