"""Rules mapping base-model confidence vectors to the ensemble's published output.

Every rule takes ``confidences`` of shape ``(n_models, K)`` for one sample or
``(n_models, N, K)`` for a batch and returns ``(K,)`` or ``(N, K)``. Ties are
broken by lowest model index, then lowest class index.
"""

import numpy as np

from .exceptions import ConfigError, UsageError
from .nn import softmax

FUSION_RULES = ("average", "first_agreed", "max_agreed", "max_confidence", "weighted")


def _as_batch(confidences):
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.ndim == 2:
        return conf[:, None, :], True
    if conf.ndim == 3:
        return conf, False
    raise UsageError("confidences must have shape (n_models, K) or (n_models, N, K)")


def _unbatch(out, single):
    return out[0] if single else out


def fuse_average(confidences):
    """Per-class arithmetic mean over models."""
    conf, single = _as_batch(confidences)
    return _unbatch(conf.mean(axis=0), single)


def fuse_weighted(confidences, weights):
    conf, single = _as_batch(confidences)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (conf.shape[0],):
        raise UsageError("one weight per model is required")
    return _unbatch(np.tensordot(weights, conf, axes=1), single)


def _pick(conf, chosen, fallback):
    n_samples = conf.shape[1]
    out = conf[chosen, np.arange(n_samples)]
    return np.where(fallback[:, None], conf.mean(axis=0), out)


def agreed_selection(confidences, rule="first_agreed"):
    """Index of the model an agreed rule outputs, and the fallback mask.

    A model agrees when its argmax equals the argmax of the averaged vector.
    When no model agrees (possible with three or more classes, e.g.
    ``[.4, .6, 0]`` and ``[.4, 0, .6]``) the rule falls back to the average.
    """
    conf, _ = _as_batch(confidences)
    label = np.argmax(conf.mean(axis=0), axis=1)
    agrees = np.argmax(conf, axis=2) == label[None, :]
    fallback = ~agrees.any(axis=0)
    if rule == "first_agreed":
        chosen = np.argmax(agrees, axis=0)
    elif rule == "max_agreed":
        top = np.where(agrees, conf.max(axis=2), -np.inf)
        chosen = np.argmax(top, axis=0)
    else:
        raise ConfigError(f"{rule!r} is not an agreed fusion rule")
    return chosen, fallback


def fuse_first_agreed(confidences, return_fallback=False):
    """Vector of the lowest-index model predicting the averaged label."""
    conf, single = _as_batch(confidences)
    chosen, fallback = agreed_selection(conf, "first_agreed")
    out = _unbatch(_pick(conf, chosen, fallback), single)
    return (out, int(fallback.sum())) if return_fallback else out


def fuse_max_agreed(confidences, return_fallback=False):
    """Most confident vector among models predicting the averaged label."""
    conf, single = _as_batch(confidences)
    chosen, fallback = agreed_selection(conf, "max_agreed")
    out = _unbatch(_pick(conf, chosen, fallback), single)
    return (out, int(fallback.sum())) if return_fallback else out


def fuse_max_confidence(confidences):
    """Most confident vector over all models, regardless of agreement."""
    conf, single = _as_batch(confidences)
    chosen = np.argmax(conf.max(axis=2), axis=0)
    return _unbatch(conf[chosen, np.arange(conf.shape[1])], single)


def fuse(confidences, rule, weights=None, return_fallback=False):
    """Dispatch to the named fusion rule."""
    if rule == "average":
        out, n_fb = fuse_average(confidences), 0
    elif rule == "first_agreed":
        out, n_fb = fuse_first_agreed(confidences, return_fallback=True)
    elif rule == "max_agreed":
        out, n_fb = fuse_max_agreed(confidences, return_fallback=True)
    elif rule == "max_confidence":
        out, n_fb = fuse_max_confidence(confidences), 0
    elif rule == "weighted":
        if weights is None:
            raise ConfigError("weighted fusion needs learned weights")
        out, n_fb = fuse_weighted(confidences, weights), 0
    else:
        raise ConfigError(f"unknown fusion rule {rule!r}; choose from {FUSION_RULES}")
    return (out, n_fb) if return_fallback else out


def _weighted_ce(theta, q):
    w = softmax(theta)
    p = w @ q
    return float(-np.mean(np.log(np.maximum(p, 1e-300)))), w, p


def learn_fusion_weights(confidences, labels, steps=200, lr=0.5, seed=0, batch_size=None):
    """Fit simplex weights minimizing cross-entropy of the weighted average.

    Weights are ``softmax(theta)`` with ``theta`` starting at zero (uniform).
    Plain gradient descent on the full training set unless ``batch_size`` is
    given, in which case minibatches are drawn with ``seed``. The returned
    weights are the best full-set iterate, so they never do worse than uniform.

    Parameters
    ----------
    confidences : ndarray of shape (n_models, N, K)
        Frozen base-model outputs on the training set.
    labels : ndarray of shape (N,)
    """
    if steps <= 0:
        raise ConfigError("steps must be positive")
    conf = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_models, n_samples, _ = conf.shape
    q = conf[:, np.arange(n_samples), labels]
    theta = np.zeros(n_models)
    best_loss, best_w, _ = _weighted_ce(theta, q)
    if n_models == 1:
        return best_w
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        qb = q if batch_size is None else q[:, rng.choice(n_samples, min(batch_size, n_samples), replace=False)]
        w = softmax(theta)
        p = np.maximum(w @ qb, 1e-300)
        grad_w = -np.mean(qb / p, axis=1)
        theta -= lr * w * (grad_w - w @ grad_w)
        loss, w_new, _ = _weighted_ce(theta, q)
        if loss < best_loss:
            best_loss, best_w = loss, w_new
    return best_w
