import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_privacy.exceptions import NumericError, ShapeError, UsageError, ConfigError
from ensemble_privacy.nn import (
    GradientSet,
    MLPModel,
    dp_clip_and_noise,
    loss_and_grad,
    mixup_batch,
    per_example_grads,
    softmax,
)
from ensemble_privacy.training import DPConfig

from .oracles import finite_difference_check, naive_forward


def random_model(sizes, seed=0, activation="tanh", bias_scale=0.5):
    rng = np.random.default_rng(seed)
    model = MLPModel.initialize(sizes, activation, rng)
    for b in model.biases:
        b[:] = bias_scale * rng.standard_normal(b.shape)
    return model


class TestForward:
    def test_zero_model_is_uniform(self):
        model = MLPModel.zeros((3, 5, 4))
        np.testing.assert_allclose(model.forward(np.ones(3)), np.full(4, 0.25), atol=1e-15)

    def test_large_bias_dominates(self):
        model = MLPModel((2, 2), [np.eye(2)], [np.array([10.0, 0.0])], "relu")
        out = model.forward(np.zeros(2))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-4)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_naive_oracle(self, activation):
        model = random_model((8, 4, 3), seed=1, activation=activation)
        X = np.random.default_rng(2).standard_normal((20, 8))
        expected = np.array([naive_forward(model, x) for x in X])
        np.testing.assert_allclose(model.forward(X), expected, atol=1e-9, rtol=0)

    def test_dimension_mismatch(self):
        model = MLPModel.zeros((3, 2))
        with pytest.raises(ShapeError):
            model.forward(np.zeros(4))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((5, 2)))

    def test_non_finite_input_raises(self):
        model = random_model((2, 3, 2), activation="relu")
        with pytest.raises(NumericError):
            model.forward(np.array([np.inf, 0.0]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 50.0))
    def test_outputs_are_simplex(self, seed, scale):
        model = random_model((5, 6, 6, 4), seed=seed)
        X = scale * np.random.default_rng(seed).standard_normal((7, 5))
        P = model.forward(X)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_extreme_logits(self):
        p = softmax(np.array([[1000.0, -1000.0, 0.0]]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]])


class TestSerialization:
    def test_round_trip_is_exact(self):
        model = random_model((4, 7, 3), seed=5)
        clone = MLPModel.from_json(model.to_json())
        assert clone.to_json() == model.to_json()
        for a, b in zip(model.weights + model.biases, clone.weights + clone.biases):
            assert np.array_equal(a, b)

    def test_weight_shapes_must_chain(self):
        with pytest.raises(ShapeError):
            MLPModel((3, 2), [np.zeros((2, 2))], [np.zeros(2)], "relu")

    def test_frozen_model_is_read_only(self):
        model = random_model((2, 2)).freeze()
        with pytest.raises(ValueError):
            model.weights[0][0, 0] = 1.0


class TestLoss:
    def test_uniform_loss_is_log_k(self):
        model = MLPModel.zeros((3, 4, 6))
        loss, _ = loss_and_grad(model, np.ones((5, 3)), np.arange(5) % 6)
        assert loss == pytest.approx(math.log(6), abs=1e-12)

    def test_zero_penalty_on_zero_weights(self):
        model = MLPModel.zeros((3, 4))
        X, y = np.ones((2, 3)), np.array([0, 1])
        base, _ = loss_and_grad(model, X, y)
        pen, _ = loss_and_grad(model, X, y, l1_weight=0.3, l2_weight=0.7)
        assert base == pen

    def test_penalty_value(self):
        model = random_model((3, 4, 2), seed=3)
        X, y = np.random.default_rng(0).standard_normal((4, 3)), np.array([0, 1, 1, 0])
        base, _ = loss_and_grad(model, X, y)
        l1 = sum(np.abs(w).sum() for w in model.weights)
        l2 = sum((w * w).sum() for w in model.weights)
        pen, _ = loss_and_grad(model, X, y, 0.01, 0.1)
        assert pen == pytest.approx(base + 0.01 * l1 + 0.1 * l2, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            loss_and_grad(MLPModel.zeros((2, 2)), np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_label_out_of_range(self):
        with pytest.raises(UsageError):
            loss_and_grad(MLPModel.zeros((2, 2)), np.zeros((1, 2)), np.array([2]))

    @pytest.mark.parametrize("sizes", [(4, 3), (5, 6, 3), (3, 5, 4, 4), (6, 4, 5, 3, 5)])
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_gradients_match_finite_differences(self, sizes, activation):
        model = random_model(sizes, seed=len(sizes), activation=activation)
        rng = np.random.default_rng(11)
        X = rng.standard_normal((6, sizes[0]))
        y = rng.integers(0, sizes[-1], 6)
        err = finite_difference_check(
            model, lambda m: loss_and_grad(m, X, y, 0.0, 0.05)[0],
            loss_and_grad(model, X, y, 0.0, 0.05)[1],
        )
        assert err < 1e-4

    def test_soft_label_gradient(self):
        model = random_model((3, 4, 3), seed=9)
        rng = np.random.default_rng(1)
        X = rng.standard_normal((5, 3))
        Y = rng.dirichlet(np.ones(3), size=5)
        err = finite_difference_check(model, lambda m: loss_and_grad(m, X, Y)[0],
                                      loss_and_grad(model, X, Y)[1])
        assert err < 1e-4


class TestPerExample:
    def test_single_example_equals_batch(self):
        model = random_model((3, 4, 2), seed=2)
        X, y = np.array([[0.1, -0.3, 0.7]]), np.array([1])
        (g,) = per_example_grads(model, X, y)
        _, batch = loss_and_grad(model, X, y)
        np.testing.assert_allclose(g.flatten(), batch.flatten(), atol=1e-12)

    def test_identical_samples_identical_grads(self):
        model = random_model((3, 4, 2), seed=2)
        X, y = np.tile([[0.2, 0.5, -1.0]], (2, 1)), np.array([0, 0])
        a, b = per_example_grads(model, X, y)
        assert np.array_equal(a.flatten(), b.flatten())

    def test_mean_equals_batch_gradient(self):
        model = random_model((5, 7, 6, 3), seed=4, activation="relu")
        rng = np.random.default_rng(3)
        X, y = rng.standard_normal((8, 5)), rng.integers(0, 3, 8)
        grads = per_example_grads(model, X, y)
        mean = sum(g.flatten() for g in grads) / len(grads)
        np.testing.assert_allclose(mean, loss_and_grad(model, X, y)[1].flatten(), atol=1e-9)


def _grad_with_norm(norm, shape=(3, 2)):
    w = np.zeros(shape)
    w[0, 0] = norm
    return GradientSet([w], [np.zeros(shape[1])])


class TestDP:
    def test_pure_clipping(self):
        out = dp_clip_and_noise([_grad_with_norm(10.0)], DPConfig(1.0, 0.0), 0)
        assert out.norm() == pytest.approx(1.0, abs=1e-9)

    def test_small_gradients_unchanged(self):
        grads = [_grad_with_norm(0.3), _grad_with_norm(0.5)]
        out = dp_clip_and_noise(grads, DPConfig(1.0, 0.0), 0)
        np.testing.assert_allclose(out.flatten(), (grads[0].flatten() + grads[1].flatten()) / 2,
                                   atol=1e-15)

    def test_noise_std_monte_carlo(self):
        batch = 4
        zero = [_grad_with_norm(0.0) for _ in range(batch)]
        rng = np.random.default_rng(0)
        draws = np.array([dp_clip_and_noise(zero, DPConfig(1.0, 1.0), rng).flatten()
                          for _ in range(10_000)])
        per_coord = draws.std(axis=0)
        np.testing.assert_allclose(per_coord, 1.0 / batch, rtol=0.05)

    @pytest.mark.parametrize("dp", [DPConfig(0.0, 1.0), DPConfig(1.0, -0.1), DPConfig(-1, 0)])
    def test_invalid_config(self, dp):
        with pytest.raises(ConfigError):
            dp_clip_and_noise([_grad_with_norm(1.0)], dp, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.01, 5.0))
    def test_clipped_norm_bound(self, seed, clip):
        rng = np.random.default_rng(seed)
        g = GradientSet([rng.standard_normal((4, 3)) * 10], [rng.standard_normal(3)])
        out = dp_clip_and_noise([g], DPConfig(clip, 0.0), rng)
        assert out.norm() <= clip + 1e-9


class TestMixup:
    def test_lambda_one_is_identity(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        y = np.array([0, 1, 2])
        Xm, Ym, lam = mixup_batch(X, y, 1.0, 0, n_classes=3, lam=1.0)
        assert lam == 1.0
        np.testing.assert_array_equal(Xm, X)
        np.testing.assert_array_equal(Ym, np.eye(3))

    def test_midpoint(self):
        X = np.array([[0.0, 0.0], [2.0, 2.0]])
        Xm, Ym, _ = mixup_batch(X, np.array([0, 1]), 1.0, 0, n_classes=2, lam=0.5)
        np.testing.assert_allclose(Xm, [[1.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(Ym, [[0.5, 0.5], [0.5, 0.5]])

    def test_beta_mean(self):
        rng = np.random.default_rng(0)
        X, y = np.zeros((2, 1)), np.array([0, 1])
        lams = [mixup_batch(X, y, 1.0, rng, n_classes=2)[2] for _ in range(10_000)]
        assert abs(np.mean(lams) - 0.5) < 0.02

    def test_soft_labels_sum_to_one(self):
        rng = np.random.default_rng(4)
        X, y = rng.standard_normal((9, 3)), rng.integers(0, 4, 9)
        _, Y, _ = mixup_batch(X, y, 0.4, rng, n_classes=4)
        np.testing.assert_allclose(Y.sum(axis=1), 1.0, atol=1e-12)

    def test_batch_of_one(self):
        with pytest.raises(UsageError):
            mixup_batch(np.zeros((1, 2)), np.array([0]), 1.0, 0, n_classes=2)
