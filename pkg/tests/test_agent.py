import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinbridge.agent import (TRAIN_LEVELS, BnnArchitecture, ParamsFormatError,
                              TargetScaler, TrainConfig, TrainedAgent,
                              TrainingError, VariationalParams, _kl_to_prior,
                              _softplus, bnn_forward, bnn_init, bnn_train,
                              elbo_loss, load_params, predict_discrepancy,
                              predict_offsets, save_params)
from twinbridge.core import (DomainError, NetworkState, StateSpace,
                             normalize_states, sample_candidates)
from twinbridge.envs import Role, SyntheticEnvConfig, synthetic_true_kl

TINY = BnnArchitecture(3, (4, 3), 1)
FULL = BnnArchitecture()


def make_regression_set(n_rows, seed, arch=TINY):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n_rows, arch.input_dim))
    y = np.sin(X.sum(axis=1) * 2.0) + 0.1 * rng.normal(size=n_rows)
    return X, y


class TestArchitecture:
    def test_default_widths(self):
        assert FULL.layer_sizes() == (8, 128, 256, 256, 128, 1)

    def test_default_param_count(self):
        # 8*128+128 + 128*256+256 + 256*256+256 + 256*128+128 + 128*1+1
        assert FULL.param_count() == 132_993

    def test_tiny_param_count(self):
        assert TINY.param_count() == 3 * 4 + 4 + 4 * 3 + 3 + 3 * 1 + 1

    def test_init_shapes_and_scale(self):
        p = bnn_init(FULL, seed=0)
        n = FULL.param_count()
        assert p.mu.shape == (n,) and p.rho.shape == (n,)
        np.testing.assert_allclose(p.posterior_std(), _softplus(np.full(n, -5.0)))
        assert p.posterior_std()[0] == pytest.approx(0.0067153485, abs=1e-9)

    def test_param_shape_validation(self):
        with pytest.raises(DomainError):
            VariationalParams(TINY, np.zeros(3), np.zeros(TINY.param_count()))


class TestKlToPrior:
    def test_zero_iff_equal_to_prior(self):
        mu = np.zeros(10)
        sigma = np.ones(10)
        assert _kl_to_prior(mu, sigma, 1.0) == 0.0

    def test_unit_mean_shift(self):
        assert _kl_to_prior(np.array([1.0]), np.array([1.0]), 1.0) \
            == pytest.approx(0.5)

    @given(st.floats(-3, 3), st.floats(0.05, 5))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, mu, sigma):
        kl = _kl_to_prior(np.array([mu]), np.array([sigma]), 1.0)
        assert kl >= -1e-12
        if abs(mu) > 1e-3 or abs(sigma - 1) > 1e-3:
            assert kl > 0


def fd_check(arch, n_rows, seed, indices=None, mc_samples=2, h=1e-6,
             floor=1e-8):
    """Central-difference gradient check with frozen weight noise."""
    config = TrainConfig(mc_samples=mc_samples, noise_std=0.1, dtype="float64")
    X, y = make_regression_set(n_rows, seed, arch)
    params = bnn_init(arch, seed + 1)
    # move off the init point so gradients are not accidentally symmetric
    rng = np.random.default_rng(seed + 2)
    params = VariationalParams(
        arch,
        params.mu + 0.05 * rng.normal(size=params.mu.size),
        params.rho + 0.3 * rng.normal(size=params.rho.size))
    eps = rng.standard_normal((mc_samples, params.mu.size))
    kl_weight = 0.5

    loss, g_mu, g_rho = elbo_loss(params, X, y, config, eps, kl_weight)
    assert math.isfinite(loss)

    n = params.mu.size
    if indices is None:
        indices = range(n)
    worst = 0.0
    for kind, grad in (("mu", g_mu), ("rho", g_rho)):
        for i in indices:
            def loss_at(delta):
                mu = params.mu.copy()
                rho = params.rho.copy()
                (mu if kind == "mu" else rho)[i] += delta
                moved = VariationalParams(arch, mu, rho)
                return elbo_loss(moved, X, y, config, eps, kl_weight)[0]

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            denom = max(abs(fd), abs(grad[i]), floor)
            worst = max(worst, abs(grad[i] - fd) / denom)
    return worst


class TestElboGradient:
    def test_exhaustive_on_small_network(self):
        worst = fd_check(TINY, n_rows=12, seed=5)
        assert worst <= 1e-4

    def test_exhaustive_single_mc_sample(self):
        worst = fd_check(TINY, n_rows=7, seed=9, mc_samples=1)
        assert worst <= 1e-4

    def test_sampled_components_on_default_architecture(self):
        rng = np.random.default_rng(17)
        idx = rng.choice(FULL.param_count(), size=40, replace=False)
        # the loss is ~3e5 here; h must beat float64 cancellation noise
        worst = fd_check(FULL, n_rows=16, seed=21, indices=idx, h=1e-4,
                         floor=1e-6)
        assert worst <= 1e-4

    def test_loss_is_deterministic_given_noise(self):
        config = TrainConfig(dtype="float64")
        X, y = make_regression_set(10, 3, TINY)
        params = bnn_init(TINY, 0)
        eps = np.random.default_rng(4).standard_normal((2, params.mu.size))
        a = elbo_loss(params, X, y, config, eps, 1.0)
        b = elbo_loss(params, X, y, config, eps, 1.0)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_array_equal(a[2], b[2])

    def test_input_validation(self):
        config = TrainConfig(dtype="float64")
        params = bnn_init(TINY, 0)
        eps = np.zeros((1, params.mu.size))
        with pytest.raises(DomainError):
            elbo_loss(params, np.zeros((4, 9)), np.zeros(4), config, eps, 1.0)
        with pytest.raises(DomainError):
            elbo_loss(params, np.zeros((4, 3)), np.zeros(5), config, eps, 1.0)
        with pytest.raises(DomainError):
            elbo_loss(params, np.zeros((0, 3)), np.zeros(0), config, eps, 1.0)


class TestForward:
    def test_zero_noise_is_mean_network(self):
        params = bnn_init(TINY, 2)
        x = np.array([0.2, 0.5, 0.8])
        zero = np.zeros(params.mu.size)
        a = bnn_forward(params, x, zero)
        b = bnn_forward(params, x, zero)
        assert a == b

    def test_noise_changes_output(self):
        params = bnn_init(TINY, 2)
        x = np.array([0.2, 0.5, 0.8])
        rng = np.random.default_rng(0)
        big = VariationalParams(TINY, params.mu, params.rho + 6.0)
        a = bnn_forward(big, x, rng.standard_normal(params.mu.size))
        b = bnn_forward(big, x, rng.standard_normal(params.mu.size))
        assert a != b

    def test_shape_validation(self):
        params = bnn_init(TINY, 2)
        with pytest.raises(DomainError):
            bnn_forward(params, np.zeros(4), np.zeros(params.mu.size))
        with pytest.raises(DomainError):
            bnn_forward(params, np.zeros(3), np.zeros(3))


class TestTraining:
    def small_config(self, epochs=40, lr=1.0, seed=0):
        return TrainConfig(learning_rate=lr, epochs=epochs, batch_size=64,
                           seed=seed, dtype="float32")

    def test_bitwise_determinism(self):
        X, y = make_regression_set(48, 1, TINY)
        a = bnn_train(bnn_init(TINY, 3), X, y, self.small_config())
        b = bnn_train(bnn_init(TINY, 3), X, y, self.small_config())
        np.testing.assert_array_equal(a.params.mu, b.params.mu)
        np.testing.assert_array_equal(a.params.rho, b.params.rho)
        np.testing.assert_array_equal(a.loss_history, b.loss_history)

    def test_loss_history_shape_and_trend(self):
        X, y = make_regression_set(64, 2, TINY)
        agent = bnn_train(bnn_init(TINY, 3), X, y, self.small_config(epochs=60))
        assert agent.loss_history.shape == (60,)
        assert np.all(np.isfinite(agent.loss_history))
        assert agent.loss_history[-10:].mean() < agent.loss_history[:10].mean()

    def test_constant_shift_recovery(self):
        # every residual equals +c: the agent's offsets must come back near c
        c = 7.5
        rng = np.random.default_rng(6)
        X = rng.uniform(0, 1, size=(84, TINY.input_dim))
        y = np.full(84, c)
        agent = bnn_train(bnn_init(TINY, 1), X, y, self.small_config())
        # state part is input_dim - 1 wide; the level column is appended
        out = predict_offsets(agent, np.array([0.4, 0.6]), 200, seed=3)
        assert abs(out.mean() - c) <= 0.2 * c

    def test_zero_targets_give_near_zero_offsets(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(0, 1, size=(84, TINY.input_dim))
        y = np.zeros(84)
        agent = bnn_train(bnn_init(TINY, 1), X, y, self.small_config())
        out = predict_offsets(agent, np.array([0.5, 0.5]), 200, seed=3)
        # scaler degenerates to identity; outputs stay at the prediction floor
        assert abs(out.mean()) < 0.5

    def test_scaler_stored(self):
        X, y = make_regression_set(48, 4, TINY)
        y = y * 12.0 + 40.0
        agent = bnn_train(bnn_init(TINY, 3), X, y, self.small_config())
        assert agent.scaler.mean == pytest.approx(y.mean())
        assert agent.scaler.std == pytest.approx(y.std())

    def test_divergence_guard_raises(self):
        X, y = make_regression_set(32, 5, TINY)
        with pytest.raises(TrainingError):
            bnn_train(bnn_init(TINY, 3), X, y * 1e30,
                      TrainConfig(learning_rate=1e6, epochs=50,
                                  noise_std=1e-6, seed=0))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(DomainError):
            TrainConfig(epochs=0)
        with pytest.raises(DomainError):
            TrainConfig(mc_samples=0)
        with pytest.raises(DomainError):
            TrainConfig(noise_std=0.0)


class TestPrediction:
    def trained(self):
        X, y = make_regression_set(64, 7, TINY)
        return bnn_train(bnn_init(TINY, 9), X, y,
                         TrainConfig(learning_rate=1.0, epochs=30,
                                     batch_size=64, seed=0))

    def test_offsets_deterministic_per_seed(self):
        agent = self.trained()
        x = np.array([0.3, 0.3])
        a = predict_offsets(agent, x, 64, seed=11)
        b = predict_offsets(agent, x, 64, seed=11)
        c = predict_offsets(agent, x, 64, seed=12)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_offsets_pure_across_unrelated_calls(self):
        agent = self.trained()
        x = np.array([0.3, 0.3])
        a = predict_offsets(agent, x, 32, seed=5)
        predict_offsets(agent, np.array([0.9, 0.1]), 128, seed=99)
        b = predict_offsets(agent, x, 32, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_offsets_count_validation(self):
        with pytest.raises(DomainError):
            predict_offsets(self.trained(), np.array([0.3, 0.3]), 0, seed=1)

    def test_discrepancy_head_rank_correlation(self):
        # train the regressor on closed-form divergences, check ranking
        real = SyntheticEnvConfig(Role.REAL)
        sim = SyntheticEnvConfig(Role.SIM)
        states = sample_candidates(StateSpace(), 160, set(), seed=55)
        train_states, test_states = states[:120], states[120:]
        Xs = normalize_states(train_states)
        X = np.concatenate([Xs, np.full((len(train_states), 1), 0.5)], axis=1)
        y = np.array([synthetic_true_kl(real, sim, s) for s in train_states])
        agent = bnn_train(bnn_init(BnnArchitecture(), 13), X, y,
                          TrainConfig(learning_rate=1.0, epochs=150, seed=2))
        preds = np.array([predict_discrepancy(agent, s, seed=3)[0]
                          for s in test_states])
        truth = np.array([synthetic_true_kl(real, sim, s) for s in test_states])
        from scipy.stats import spearmanr
        rho = spearmanr(preds, truth).statistic
        assert rho > 0.5


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        params = bnn_init(FULL, 3)
        rng = np.random.default_rng(1)
        params = VariationalParams(FULL,
                                   params.mu + rng.normal(size=params.mu.size),
                                   params.rho + rng.normal(size=params.mu.size))
        path = tmp_path / "agent.bin"
        save_params(path, params)
        back = load_params(path)
        assert back.arch == FULL
        np.testing.assert_array_equal(back.mu, params.mu)
        np.testing.assert_array_equal(back.rho, params.rho)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "agent.bin"
        save_params(path, bnn_init(TINY, 0))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(ParamsFormatError):
            load_params(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "agent.bin"
        save_params(path, bnn_init(TINY, 0))
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(ParamsFormatError):
            load_params(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "agent.bin"
        save_params(path, bnn_init(TINY, 0))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ParamsFormatError):
            load_params(path)

    def test_header_width_count_validated(self, tmp_path):
        import struct
        path = tmp_path / "agent.bin"
        path.write_bytes(b"TWB1" + struct.pack("<i", 1) + b"\x08\x00\x00\x00")
        with pytest.raises(ParamsFormatError):
            load_params(path)


class TestLevels:
    def test_train_levels_pinned(self):
        assert len(TRAIN_LEVELS) == 21
        assert TRAIN_LEVELS[0] == pytest.approx(0.025)
        assert TRAIN_LEVELS[-1] == pytest.approx(0.975)
        diffs = np.diff(TRAIN_LEVELS)
        np.testing.assert_allclose(diffs, diffs[0])
