"""SGD training of :class:`~ensemble_privacy.nn.MLPModel` with regularizers and DP-SGD."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, NumericError, TrainingError
from .nn import (
    MLPModel,
    _as_targets,
    _backprop,
    _clip_and_noise_arrays,
    _forward_cache,
    _per_example_arrays,
    log_softmax,
    loss_and_grad,
    mixup_batch,
    penalty,
    penalty_grads,
)


# -- learning-rate schedules --------------------------------------------------------


@dataclass(frozen=True)
class ConstantLR:
    lr: float = 0.1


@dataclass(frozen=True)
class StepLR:
    lr: float = 0.1
    drop_epochs: tuple = ()
    factor: float = 0.1


@dataclass(frozen=True)
class CyclicLR:
    """Cosine annealing restarted every ``cycle_len`` epochs."""

    lr_max: float = 0.1
    cycle_len: int = 50


def lr_at(schedule, epoch, step=0, steps_per_epoch=1):
    """Learning rate for ``step`` (0-based) inside the 1-based ``epoch``.

    For the cyclic schedule the position within the current cycle is
    ``t = (epoch - 1) % cycle_len + step / steps_per_epoch``, so
    ``lr_at(s, 1) == lr_max`` and the end of the last epoch of a cycle,
    ``lr_at(s, cycle_len, steps_per_epoch, steps_per_epoch)``, is 0.
    """
    if isinstance(schedule, ConstantLR):
        return schedule.lr
    if isinstance(schedule, StepLR):
        drops = sum(1 for d in schedule.drop_epochs if epoch > d)
        return schedule.lr * schedule.factor**drops
    if isinstance(schedule, CyclicLR):
        t = (epoch - 1) % schedule.cycle_len + step / steps_per_epoch
        return schedule.lr_max / 2.0 * (math.cos(math.pi * t / schedule.cycle_len) + 1.0)
    raise ConfigError(f"unknown learning-rate schedule {schedule!r}")


def schedule_from_dict(payload):
    kind = payload.get("kind", "constant")
    args = {k: v for k, v in payload.items() if k != "kind"}
    try:
        if kind == "constant":
            return ConstantLR(**args)
        if kind == "step":
            args["drop_epochs"] = tuple(args.get("drop_epochs", ()))
            return StepLR(**args)
        if kind == "cyclic":
            return CyclicLR(**args)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} schedule: {exc}") from None
    raise ConfigError(f"unknown lr schedule kind {kind!r}")


def schedule_to_dict(schedule):
    kind = {ConstantLR: "constant", StepLR: "step", CyclicLR: "cyclic"}[type(schedule)]
    out = {"kind": kind, **asdict(schedule)}
    if kind == "step":
        out["drop_epochs"] = list(schedule.drop_epochs)
    return out


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class DPConfig:
    """DP-SGD mechanism parameters.

    ``delta`` is carried for reporting only; no privacy accounting is done.
    ``clip_norm = inf`` together with ``noise_multiplier = 0`` disables the
    mechanism entirely.
    """

    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5

    def validate(self):
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if not self.noise_multiplier >= 0:
            raise ConfigError("noise_multiplier must be >= 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        return self

    @property
    def disabled(self):
        return math.isinf(self.clip_norm) and self.noise_multiplier == 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_schedule: object = field(default_factory=ConstantLR)
    l1_weight: float = 0.0
    l2_weight: float = 0.0
    mixup_alpha: float = 0.0
    dp: DPConfig = None
    seed: int = 0
    checkpoint_epochs: tuple = ()
    hidden_sizes: tuple = (128,)
    activation: str = "relu"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.l1_weight < 0 or self.l2_weight < 0 or self.mixup_alpha < 0:
            raise ConfigError("l1_weight, l2_weight and mixup_alpha must be >= 0")
        if any(not 1 <= e <= self.epochs for e in self.checkpoint_epochs):
            raise ConfigError("checkpoint_epochs must lie in [1, epochs]")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        if self.dp is not None:
            self.dp.validate()
        lr_at(self.lr_schedule, 1)
        return self

    def replace(self, **changes):
        params = {f: getattr(self, f) for f in self.__dataclass_fields__}
        params.update(changes)
        return TrainConfig(**params)

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_schedule": schedule_to_dict(self.lr_schedule),
            "l1_weight": self.l1_weight,
            "l2_weight": self.l2_weight,
            "mixup_alpha": self.mixup_alpha,
            "dp": None if self.dp is None else asdict(self.dp),
            "seed": self.seed,
            "checkpoint_epochs": list(self.checkpoint_epochs),
            "hidden_sizes": list(self.hidden_sizes),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "lr_schedule" in payload:
            payload["lr_schedule"] = schedule_from_dict(payload["lr_schedule"])
        if payload.get("dp") is not None:
            payload["dp"] = DPConfig(**payload["dp"])
        for key in ("checkpoint_epochs", "hidden_sizes"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload).validate()


@dataclass
class TrainResult:
    model: MLPModel
    checkpoints: dict
    history: list


# -- training loop ------------------------------------------------------------------


def _dataset_loss_acc(model, X, y):
    _, probs, logits = _forward_cache(model, X)
    loss = float(-np.mean(log_softmax(logits)[np.arange(len(y)), y]))
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc


def train_model(
    X,
    y,
    config,
    seed=None,
    *,
    n_classes=None,
    eval_data=None,
    output_penalty=None,
):
    """Train one MLP with minibatch SGD.

    Parameters
    ----------
    X : ndarray of shape (N, d)
    y : ndarray of shape (N,)
        Integer labels in ``[0, n_classes)``.
    config : TrainConfig
    seed : int, optional
        Overrides ``config.seed``. Initialization, shuffling, mixup, DP noise
        and ``output_penalty`` each draw from their own child stream.
    n_classes : int, optional
        Defaults to ``max(y) + 1``.
    eval_data : tuple (X_eval, y_eval), optional
        Held-out data whose loss/accuracy is logged every epoch.
    output_penalty : callable, optional
        ``output_penalty(model, probs, rng) -> (value, d value / d probs)``
        adds a term on the batch softmax outputs to the loss.

    Returns
    -------
    TrainResult
        Final model, checkpoints keyed by epoch, per-epoch history dicts.
    """
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ConfigError("training split must be a non-empty (N, d) matrix with N labels")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    seed = config.seed if seed is None else seed
    dp = config.dp if config.dp is not None and not config.dp.disabled else None
    if dp is not None and output_penalty is not None:
        raise ConfigError("DP-SGD cannot be combined with a batch-coupled output penalty")

    init_rng, shuffle_rng, mix_rng, noise_rng, penalty_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)
    )
    sizes = (X.shape[1], *config.hidden_sizes, n_classes)
    model = MLPModel.initialize(sizes, config.activation, init_rng)

    n = X.shape[0]
    bs = min(config.batch_size, n)
    steps = math.ceil(n / bs)
    checkpoints = {}
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for step in range(steps):
            idx = order[step * bs:(step + 1) * bs]
            xb, tb = X[idx], _as_targets(y[idx], n_classes, len(idx))
            if config.mixup_alpha > 0 and len(idx) >= 2:
                xb, tb, _ = mixup_batch(xb, tb, config.mixup_alpha, mix_rng)
            lr = lr_at(config.lr_schedule, epoch, step, steps)
            try:
                if dp is not None:
                    losses, gw, gb = _per_example_arrays(model, xb, tb)
                    grads = _clip_and_noise_arrays(
                        gw, gb, dp.clip_norm, dp.noise_multiplier, noise_rng
                    )
                    for g, p in zip(grads.weights, penalty_grads(model, config.l1_weight, config.l2_weight)):
                        g += p
                    loss = float(losses.mean()) + penalty(model, config.l1_weight, config.l2_weight)
                else:
                    hook = None
                    if output_penalty is not None:
                        def hook(probs, _m=model):
                            return output_penalty(_m, probs, penalty_rng)
                    loss, grads = loss_and_grad(
                        model, xb, tb, config.l1_weight, config.l2_weight, hook
                    )
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from None
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch)
            epoch_loss += loss * len(idx)
            for w, g in zip(model.weights, grads.weights):
                w -= lr * g
            for b, g in zip(model.biases, grads.biases):
                b -= lr * g
        try:
            train_loss, train_acc = _dataset_loss_acc(model, X, y)
        except NumericError:
            raise TrainingError(f"training diverged in epoch {epoch}", epoch) from None
        record = {
            "epoch": epoch,
            "batch_loss": epoch_loss / n,
            "train_loss": train_loss,
            "train_acc": train_acc,
        }
        if eval_data is not None:
            record["eval_loss"], record["eval_acc"] = _dataset_loss_acc(model, *eval_data)
        history.append(record)
        if epoch in config.checkpoint_epochs:
            checkpoints[epoch] = model.copy().freeze()
    return TrainResult(model.freeze(), checkpoints, history)


class MLPClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn compatible wrapper around :func:`train_model`.

    Parameters
    ----------
    hidden_sizes : tuple of int, default=(128,)
    activation : {"relu", "tanh"}, default="relu"
    epochs : int, default=200
    batch_size : int, default=32
    learning_rate : float, default=0.1
        Used when ``lr_schedule`` is None (constant schedule).
    lr_schedule : ConstantLR, StepLR or CyclicLR, optional
    l1_weight, l2_weight : float, default=0
    mixup_alpha : float, default=0
    dp : DPConfig, optional
    checkpoint_epochs : tuple of int, default=()
    classes : array-like, optional
        Full label set; needed when a training subset may miss a class.
    random_state : int, default=0

    Attributes
    ----------
    classes_ : ndarray
    model_ : MLPModel
    checkpoints_ : dict of int -> MLPModel
    history_ : list of dict
    """

    def __init__(
        self,
        hidden_sizes=(128,),
        activation="relu",
        epochs=200,
        batch_size=32,
        learning_rate=0.1,
        lr_schedule=None,
        l1_weight=0.0,
        l2_weight=0.0,
        mixup_alpha=0.0,
        dp=None,
        checkpoint_epochs=(),
        classes=None,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.l1_weight = l1_weight
        self.l2_weight = l2_weight
        self.mixup_alpha = mixup_alpha
        self.dp = dp
        self.checkpoint_epochs = checkpoint_epochs
        self.classes = classes
        self.random_state = random_state

    def train_config(self):
        schedule = self.lr_schedule or ConstantLR(self.learning_rate)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_schedule=schedule,
            l1_weight=self.l1_weight,
            l2_weight=self.l2_weight,
            mixup_alpha=self.mixup_alpha,
            dp=self.dp,
            seed=self.random_state,
            checkpoint_epochs=tuple(self.checkpoint_epochs),
            hidden_sizes=tuple(self.hidden_sizes),
            activation=self.activation,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y) if self.classes is None else np.asarray(self.classes)
        encoded = np.searchsorted(classes, y)
        if np.any(classes[np.clip(encoded, 0, len(classes) - 1)] != y):
            raise ValueError("y contains labels outside `classes`")
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        result = train_model(X, encoded, self.train_config(), n_classes=len(classes))
        self.model_ = result.model
        self.checkpoints_ = result.checkpoints
        self.history_ = result.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.forward(X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
