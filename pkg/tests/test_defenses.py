import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_privacy.data import generate_gaussian_mixture
from ensemble_privacy.defenses import (
    MaskConfig,
    MemGuardRandom,
    MMDConfig,
    MMDMixupTrainer,
    memguard_random,
    mmd_squared,
    mmd_squared_grad,
    train_with_mmd_mixup,
)
from ensemble_privacy.exceptions import ConfigError, UsageError
from ensemble_privacy.nn import MLPModel, loss_and_grad
from ensemble_privacy.training import ConstantLR, TrainConfig, train_model

from .oracles import finite_difference_check, naive_mmd


class TestMemGuard:
    def test_zero_noise_identity(self):
        P = np.random.default_rng(0).dirichlet(np.ones(4), size=6)
        np.testing.assert_array_equal(memguard_random(P, 0.0, 1), P)

    def test_argmax_preserved_10k(self):
        rng = np.random.default_rng(1)
        P = rng.dirichlet(np.full(5, 0.5), size=10_000)
        for rho in (0.01, 0.1, 0.5, 2.0):
            out = memguard_random(P, rho, rng)
            assert np.array_equal(np.argmax(out, 1), np.argmax(P, 1))
            np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-12)
            assert np.all(out >= 0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 5.0), st.integers(0, 10_000))
    def test_degenerate_one_hot(self, rho, seed):
        out = memguard_random(np.array([1.0, 0.0]), rho, seed)
        assert np.argmax(out) == 0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_changes_non_top_values(self):
        P = np.array([[0.5, 0.3, 0.2]])
        assert not np.array_equal(memguard_random(P, 0.1, 0), P)

    def test_rejects_non_simplex(self):
        with pytest.raises(UsageError):
            memguard_random(np.array([0.5, 0.7]), 0.1)

    def test_negative_magnitude(self):
        with pytest.raises(ConfigError):
            memguard_random(np.array([0.5, 0.5]), -0.1)
        with pytest.raises(ConfigError):
            MaskConfig(noise_magnitude=-1)

    def test_transformer_is_repeatable(self):
        P = np.random.default_rng(2).dirichlet(np.ones(3), size=5)
        guard = MemGuardRandom(0.2, random_state=4).fit(P)
        np.testing.assert_array_equal(guard.transform(P), guard(P))
        assert guard.get_params() == {"noise_magnitude": 0.2, "random_state": 4}


class TestMMD:
    def test_identical_batches(self):
        A = np.random.default_rng(0).dirichlet(np.ones(3), size=8)
        assert mmd_squared(A, A.copy(), 0.7) == pytest.approx(0.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        A, B = rng.dirichlet(np.ones(4), 6), rng.dirichlet(np.ones(4), 9)
        assert mmd_squared(A, B, 0.5) == pytest.approx(mmd_squared(B, A, 0.5), abs=1e-12)

    def test_double_loop_toy(self):
        A = np.array([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8]])
        B = np.array([[0.5, 0.5], [0.1, 0.9], [0.7, 0.3]])
        for bw in (0.3, 1.0, 2.5):
            assert mmd_squared(A, B, bw) == pytest.approx(naive_mmd(A.tolist(), B.tolist(), bw), abs=1e-9)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        A, B = rng.dirichlet(np.ones(3), 5), rng.dirichlet(np.ones(3), 4)
        g = mmd_squared_grad(A, B, 0.4)
        h = 1e-6
        for idx in np.ndindex(A.shape):
            up, down = A.copy(), A.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (naive_mmd(up, B, 0.4) - naive_mmd(down, B, 0.4)) / (2 * h)
            assert g[idx] == pytest.approx(numeric, abs=1e-7)

    @pytest.mark.parametrize("kw", [{"bandwidth": 0}, {"weight": -1}, {"reference_batch_size": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            MMDConfig(**kw)


@pytest.fixture(scope="module")
def blobs():
    ds, plan = generate_gaussian_mixture(3, 4, 30, 30, 1.0, seed=5)
    X, y = ds.features, ds.labels
    return X[plan.victim_train], y[plan.victim_train], X[plan.test]


def cfg(**kw):
    base = dict(epochs=15, batch_size=10, hidden_sizes=(16,), lr_schedule=ConstantLR(0.1))
    base.update(kw)
    return TrainConfig(**base)


class TestMMDMixupTraining:
    def test_combined_loss_gradient(self, blobs):
        X, y, R = blobs
        rng = np.random.default_rng(0)
        model = MLPModel.initialize((4, 6, 3), "tanh", rng)
        Xb, yb = X[:8], y[:8]
        ref = model.forward(R[:10])  # reference outputs treated as constants
        mmd = MMDConfig(bandwidth=0.5, weight=2.0)

        def extra(probs):
            return (mmd.weight * mmd_squared(probs, ref, mmd.bandwidth),
                    mmd.weight * mmd_squared_grad(probs, ref, mmd.bandwidth))

        def loss_fn(m):
            return loss_and_grad(m, Xb, yb)[0] + mmd.weight * naive_mmd(m.forward(Xb), ref, 0.5)

        err = finite_difference_check(model, loss_fn, loss_and_grad(model, Xb, yb, output_grad=extra)[1])
        assert err < 1e-4

    def test_disabled_equals_plain(self, blobs):
        X, y, R = blobs
        a = train_with_mmd_mixup(X, y, R, cfg(), MMDConfig(weight=0.0), seed=3).model
        b = train_model(X, y, cfg(), seed=3).model
        assert a.to_json() == b.to_json()

    def test_penalty_reduces_mmd(self, blobs):
        X, y, R = blobs
        config = cfg(epochs=60, mixup_alpha=0.0)
        plain = train_with_mmd_mixup(X, y, R, config, MMDConfig(weight=0.0), seed=1).model
        guarded = train_with_mmd_mixup(X, y, R, config, MMDConfig(weight=5.0, bandwidth=0.5), seed=1).model
        gap = [mmd_squared(m.forward(X), m.forward(R), 0.5) for m in (plain, guarded)]
        assert gap[1] <= gap[0]

    def test_needs_reference(self, blobs):
        X, y, _ = blobs
        with pytest.raises(ConfigError):
            train_with_mmd_mixup(X, y, np.zeros((0, 4)), cfg(), MMDConfig())

    def test_trainer_protocol(self, blobs):
        X, y, R = blobs
        full = np.vstack([X, R])
        labels = np.concatenate([y, np.zeros(len(R), dtype=int)])
        ref_idx = np.arange(len(X), len(full))
        trainer = MMDMixupTrainer(MMDConfig(weight=1.0), ref_idx)
        result = trainer(full, labels, np.arange(len(X)), cfg(epochs=2), 0, 3)
        assert result.model.n_classes == 3
        shadow = trainer.for_shadow(np.arange(5), np.arange(5, 10))
        assert shadow.reference_indices.tolist() == list(range(5, 10))
