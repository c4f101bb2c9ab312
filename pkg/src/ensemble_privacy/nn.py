"""Fully connected softmax classifiers written directly in numpy.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a layer computes
``a @ W + b``. Hidden layers use ``relu`` or ``tanh``; the output layer is
always a softmax.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._rng import as_generator
from .exceptions import ConfigError, NumericError, ShapeError, UsageError

ACTIVATIONS = ("relu", "tanh")


def softmax(z):
    """Row-wise softmax with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(labels, n_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class MLPModel:
    """Parameters and architecture of a softmax MLP.

    Parameters
    ----------
    layer_sizes : tuple of int
        ``(n_features, hidden_1, ..., n_classes)``.
    weights : list of ndarray
        ``weights[l]`` has shape ``(layer_sizes[l], layer_sizes[l + 1])``.
    biases : list of ndarray
        ``biases[l]`` has shape ``(layer_sizes[l + 1],)``.
    activation : {"relu", "tanh"}
        Hidden-layer nonlinearity.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ConfigError(f"invalid layer_sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}"
                )

    @classmethod
    def initialize(cls, layer_sizes, activation="relu", rng=None):
        """Glorot-uniform weights and zero biases."""
        rng = as_generator(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(layer_sizes), weights, biases, activation)

    @classmethod
    def zeros(cls, layer_sizes, activation="relu"):
        weights = [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros(b) for b in layer_sizes[1:]]
        return cls(tuple(layer_sizes), weights, biases, activation)

    @property
    def n_features(self):
        return self.layer_sizes[0]

    @property
    def n_classes(self):
        return self.layer_sizes[-1]

    def copy(self):
        return MLPModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def freeze(self):
        """Mark parameter arrays read-only; returns ``self``."""
        for arr in (*self.weights, *self.biases):
            arr.flags.writeable = False
        return self

    def forward(self, x):
        """Class-probability output for one sample or a batch.

        A 1-D input returns a 1-D probability vector; a 2-D ``(N, d)`` input
        returns an ``(N, K)`` matrix.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.n_features:
            raise ShapeError(
                f"expected input dimension {self.n_features}, got shape {x.shape}"
            )
        probs = _forward_cache(self, batch)[1]
        return probs[0] if single else probs

    predict_proba = forward

    def squared_weight_norm(self):
        return float(sum(np.sum(w * w) for w in self.weights))

    # -- canonical serialization -------------------------------------------------

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    def to_json(self):
        """Canonical JSON text: fixed key order, shortest round-trip floats."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, payload):
        return cls(
            tuple(payload["layer_sizes"]),
            [np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in zip(
                payload["weights"], payload["layer_sizes"][:-1], payload["layer_sizes"][1:]
            )],
            [np.array(b, dtype=np.float64) for b in payload["biases"]],
            payload["activation"],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class GradientSet:
    """Per-layer gradients with the same shapes as an :class:`MLPModel`."""

    weights: list
    biases: list = field(default_factory=list)

    def arrays(self):
        return [*self.weights, *self.biases]

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def norm(self):
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def scaled(self, factor):
        return GradientSet([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other):
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def check_matches(self, model):
        for w, b, mw, mb in zip(self.weights, self.biases, model.weights, model.biases):
            if w.shape != mw.shape or b.shape != mb.shape:
                raise ShapeError("gradient shapes do not match the model")


# -- forward / backward ----------------------------------------------------------


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward_cache(model, X):
    """Return (inputs to each layer, output probabilities, logits)."""
    inputs = [X]
    a = X
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if i < n_layers - 1:
            a = _activate(z, model.activation)
            inputs.append(a)
        else:
            logits = z
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activations in forward pass")
    return inputs, softmax(logits), logits


def _as_targets(y, n_classes, n_rows):
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape != (n_rows, n_classes):
            raise ShapeError(f"soft labels must have shape {(n_rows, n_classes)}")
        return y.astype(np.float64)
    if y.shape != (n_rows,):
        raise ShapeError("labels must be a vector with one entry per sample")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise UsageError(f"labels must lie in [0, {n_classes})")
    return one_hot(y.astype(np.int64), n_classes)


def _check_batch(model, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("batch must be a non-empty (N, d) matrix")
    if X.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got {X.shape[1]}")
    return X, _as_targets(y, model.n_classes, X.shape[0])


def _backprop(model, inputs, delta):
    """Backpropagate ``delta = dL/dlogits``; gradients summed over the batch axis."""
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            da = delta @ model.weights[i].T
            a = inputs[i]
            if model.activation == "relu":
                delta = da * (a > 0)
            else:
                delta = da * (1.0 - a * a)
    return gw, gb


def _per_example_backprop(model, inputs, delta):
    """Like :func:`_backprop` but keeps a leading per-example axis."""
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = inputs[i][:, :, None] * delta[:, None, :]
        gb[i] = delta.copy()
        if i > 0:
            da = delta @ model.weights[i].T
            a = inputs[i]
            delta = da * (a > 0) if model.activation == "relu" else da * (1.0 - a * a)
    return gw, gb


def softmax_vjp(probs, grad_probs):
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def penalty(model, l1_weight, l2_weight):
    value = 0.0
    if l1_weight:
        value += l1_weight * sum(np.abs(w).sum() for w in model.weights)
    if l2_weight:
        value += l2_weight * sum((w * w).sum() for w in model.weights)
    return float(value)


def penalty_grads(model, l1_weight, l2_weight):
    """Gradients of the weight penalty (biases are not penalized)."""
    gw = []
    for w in model.weights:
        g = np.zeros_like(w)
        if l1_weight:
            g += l1_weight * np.sign(w)
        if l2_weight:
            g += 2.0 * l2_weight * w
        gw.append(g)
    return gw


def loss_and_grad(model, X, y, l1_weight=0.0, l2_weight=0.0, output_grad=None):
    """Mean cross-entropy plus weight penalties, and its exact gradient.

    Parameters
    ----------
    model : MLPModel
    X : ndarray of shape (B, d)
    y : ndarray of shape (B,) with integer labels, or (B, K) soft labels
    l1_weight, l2_weight : float
        Coefficients of ``sum |w|`` and ``sum w**2`` over all weight matrices.
    output_grad : callable, optional
        ``output_grad(probs) -> (extra_loss, d extra_loss / d probs)``; lets a
        caller add a differentiable term on the softmax outputs.

    Returns
    -------
    loss : float
    grads : GradientSet
    """
    X, T = _check_batch(model, X, y)
    inputs, probs, logits = _forward_cache(model, X)
    batch = X.shape[0]
    ce = -np.sum(T * log_softmax(logits)) / batch
    delta = (probs - T) / batch
    loss = ce + penalty(model, l1_weight, l2_weight)
    if output_grad is not None:
        extra, g_probs = output_grad(probs)
        loss += extra
        delta = delta + softmax_vjp(probs, g_probs)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    gw, gb = _backprop(model, inputs, delta)
    for g, p in zip(gw, penalty_grads(model, l1_weight, l2_weight)):
        g += p
    return float(loss), GradientSet(gw, gb)


def _per_example_arrays(model, X, y):
    X, T = _check_batch(model, X, y)
    inputs, probs, logits = _forward_cache(model, X)
    losses = -np.sum(T * log_softmax(logits), axis=1)
    gw, gb = _per_example_backprop(model, inputs, probs - T)
    return losses, gw, gb


def per_example_grads(model, X, y):
    """Cross-entropy gradient of every sample in the batch, without penalties."""
    _, gw, gb = _per_example_arrays(model, X, y)
    return [
        GradientSet([w[k] for w in gw], [b[k] for b in gb]) for k in range(gw[0].shape[0])
    ]


def _clip_and_noise_arrays(gw, gb, clip_norm, noise_multiplier, rng):
    """Vectorized clip/noise on per-example arrays with a leading batch axis."""
    batch = gw[0].shape[0]
    sq = np.zeros(batch)
    for a in (*gw, *gb):
        sq += np.sum(a.reshape(batch, -1) ** 2, axis=1)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        scale = np.minimum(1.0, clip_norm / norms)
    scale[norms == 0] = 1.0
    out_w, out_b = [], []
    for arrays, out in ((gw, out_w), (gb, out_b)):
        for a in arrays:
            summed = np.tensordot(scale, a, axes=1)
            out.append(summed)
    if noise_multiplier > 0:
        std = noise_multiplier * clip_norm
        for out in (out_w, out_b):
            for i, a in enumerate(out):
                out[i] = a + rng.normal(0.0, std, size=a.shape)
    return GradientSet([w / batch for w in out_w], [b / batch for b in out_b])


def dp_clip_and_noise(grads, dp, rng=None):
    """Clip each per-example gradient to L2 norm ``dp.clip_norm``, sum, add noise.

    Gaussian noise with standard deviation ``noise_multiplier * clip_norm`` is
    added to every coordinate of the sum, which is then divided by the batch
    size.
    """
    if not grads:
        raise UsageError("dp_clip_and_noise needs at least one gradient")
    dp.validate()
    gw = [np.stack([g.weights[i] for g in grads]) for i in range(len(grads[0].weights))]
    gb = [np.stack([g.biases[i] for g in grads]) for i in range(len(grads[0].biases))]
    return _clip_and_noise_arrays(
        gw, gb, dp.clip_norm, dp.noise_multiplier, as_generator(rng)
    )


def mixup_batch(X, y, alpha, rng=None, n_classes=None, lam=None):
    """Convex combinations of sample pairs with matching soft labels.

    Every sample ``i`` is paired with a partner ``j != i`` (a random cyclic
    order) and replaced by ``lam * x_i + (1 - lam) * x_j`` where
    ``lam ~ Beta(alpha, alpha)`` is drawn once per batch.

    Parameters
    ----------
    X : ndarray of shape (B, d)
    y : ndarray of shape (B,) or (B, K)
    alpha : float
        Beta concentration; 0 disables mixing (``lam = 1``).
    rng : Generator or int, optional
    n_classes : int, optional
        Needed when ``y`` holds integer labels.
    lam : float, optional
        Force the mixing coefficient instead of sampling it.

    Returns
    -------
    X_mixed, soft_labels, lam
    """
    if alpha < 0:
        raise ConfigError("mixup alpha must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise UsageError("mixup needs a batch of at least two samples")
    y = np.asarray(y)
    if y.ndim == 1:
        if n_classes is None:
            n_classes = int(y.max()) + 1
        T = one_hot(y.astype(np.int64), n_classes)
    else:
        T = y.astype(np.float64)
    rng = as_generator(rng)
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    order = rng.permutation(X.shape[0])
    partner = np.empty_like(order)
    partner[order] = np.roll(order, -1)
    return lam * X + (1.0 - lam) * X[partner], lam * T + (1.0 - lam) * T[partner], lam
