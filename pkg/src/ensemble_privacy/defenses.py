"""Post-hoc confidence masking and the MMD+Mixup training defense."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from ._rng import as_generator
from .exceptions import ConfigError, UsageError
from .training import train_model

# Non-top coordinates are capped this far below the top one so that rounding
# during renormalization can never create a tie.
_CAP = 1.0 - 1e-9


@dataclass(frozen=True)
class MaskConfig:
    noise_magnitude: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.noise_magnitude >= 0:
            raise ConfigError("noise_magnitude must be >= 0")


@dataclass(frozen=True)
class MMDConfig:
    """Gaussian kernel ``exp(-||a - b||^2 / (2 bandwidth^2))``, penalty ``weight``."""

    bandwidth: float = 1.0
    weight: float = 1.0
    reference_batch_size: int = 32

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be > 0")
        if not self.weight >= 0:
            raise ConfigError("weight must be >= 0")
        if self.reference_batch_size < 1:
            raise ConfigError("reference_batch_size must be >= 1")


def _check_simplex(P, atol=1e-6):
    if np.any(P < -atol) or np.any(np.abs(P.sum(axis=1) - 1.0) > atol):
        raise UsageError("input rows must be probability vectors (within 1e-6)")


def memguard_random(confidences, noise_magnitude, rng=None):
    """Label-preserving random perturbation of published confidences.

    Uniform noise in ``[-noise_magnitude, noise_magnitude]`` is added to every
    coordinate except the argmax; results are clamped at 0, capped strictly
    below the top coordinate, and renormalized. The argmax never changes.

    Parameters
    ----------
    confidences : ndarray of shape (K,) or (N, K)
    noise_magnitude : float
    rng : Generator or int, optional
    """
    if noise_magnitude < 0:
        raise ConfigError("noise_magnitude must be >= 0")
    P = np.asarray(confidences, dtype=np.float64)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    _check_simplex(P)
    if noise_magnitude == 0:
        out = P.copy()
    else:
        rng = as_generator(rng)
        rows = np.arange(P.shape[0])
        top = np.argmax(P, axis=1)
        top_val = P[rows, top]
        noise = rng.uniform(-noise_magnitude, noise_magnitude, size=P.shape)
        noise[rows, top] = 0.0
        out = np.clip(P + noise, 0.0, None)
        out = np.minimum(out, (top_val * _CAP)[:, None])
        out[rows, top] = top_val
        out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


class MemGuardRandom(BaseEstimator, TransformerMixin):
    """Transformer applying :func:`memguard_random` to confidence matrices.

    Stateless; ``fit`` only validates. Each ``transform`` call starts from
    ``random_state`` so repeated calls give the same output.
    """

    def __init__(self, noise_magnitude=0.1, random_state=0):
        self.noise_magnitude = noise_magnitude
        self.random_state = random_state

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return memguard_random(X, self.noise_magnitude, np.random.default_rng(self.random_state))

    def __call__(self, X):
        return self.transform(X)


# -- MMD ----------------------------------------------------------------------------


def _kernel(A, B, bandwidth):
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))


def mmd_squared(A, B, bandwidth=1.0):
    """Biased squared MMD between two batches under a Gaussian kernel."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    value = _kernel(A, A, bandwidth).mean() + _kernel(B, B, bandwidth).mean() \
        - 2.0 * _kernel(A, B, bandwidth).mean()
    return float(max(value, 0.0))


def mmd_squared_grad(A, B, bandwidth=1.0):
    """Gradient of :func:`mmd_squared` with respect to the rows of ``A``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    m, n = A.shape[0], B.shape[0]
    s2 = bandwidth**2
    Kaa = _kernel(A, A, bandwidth)
    Kab = _kernel(A, B, bandwidth)
    # d/dA_i of k(A_i, Z_j) = -k * (A_i - Z_j) / s2
    g_aa = -(Kaa.sum(1)[:, None] * A - Kaa @ A) / s2
    g_ab = -(Kab.sum(1)[:, None] * A - Kab @ B) / s2
    return 2.0 * g_aa / m**2 - 2.0 * g_ab / (m * n)


class MMDPenalty:
    """``weight * MMD^2`` between training-batch outputs and reference outputs.

    The reference outputs are recomputed with the current model on a random
    reference batch every step and treated as constants.
    """

    def __init__(self, mmd, X_reference):
        self.mmd = mmd
        self.X_reference = np.asarray(X_reference, dtype=np.float64)

    def __call__(self, model, probs, rng):
        size = min(self.mmd.reference_batch_size, self.X_reference.shape[0])
        ref = model.forward(self.X_reference[rng.choice(self.X_reference.shape[0], size, replace=False)])
        value = self.mmd.weight * mmd_squared(probs, ref, self.mmd.bandwidth)
        grad = self.mmd.weight * mmd_squared_grad(probs, ref, self.mmd.bandwidth)
        return value, grad


def train_with_mmd_mixup(X, y, reference, config, mmd, seed=None, n_classes=None):
    """Train with mixup (``config.mixup_alpha``) plus the MMD output penalty.

    Parameters
    ----------
    X, y : training rows
    reference : ndarray of shape (R, d)
        Held-out non-training rows of the defender.
    config : TrainConfig
    mmd : MMDConfig

    Returns
    -------
    TrainResult
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 2 or reference.shape[0] == 0:
        raise ConfigError("MMD+Mixup needs a non-empty reference split")
    if mmd.weight == 0:
        return train_model(X, y, config, seed, n_classes=n_classes)
    return train_model(X, y, config, seed, n_classes=n_classes,
                       output_penalty=MMDPenalty(mmd, reference))


class MMDMixupTrainer:
    """Base-model trainer plugging MMD+Mixup into ensemble construction.

    ``reference_indices`` index the full feature matrix passed at call time.
    """

    def __init__(self, mmd, reference_indices):
        self.mmd = mmd
        self.reference_indices = np.asarray(reference_indices, dtype=np.int64)

    def __call__(self, X, y, indices, config, seed, n_classes):
        return train_with_mmd_mixup(X[indices], y[indices], X[self.reference_indices],
                                    config, self.mmd, seed, n_classes)

    def for_shadow(self, in_indices, out_indices):
        return MMDMixupTrainer(self.mmd, out_indices)
