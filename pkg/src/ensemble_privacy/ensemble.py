"""Ensemble construction (deep, bagging, partitioning, snapshot, weighted) and prediction."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from threadpoolctl import threadpool_limits

from ._rng import derive_seed
from .data import bootstrap_sample, partition_disjoint
from .exceptions import ConfigError, UsageError
from .fusion import fuse, learn_fusion_weights
from .nn import MLPModel
from .training import CyclicLR, MLPClassifier, train_model

ENSEMBLE_KINDS = ("deep", "bagging", "partitioning", "snapshot", "weighted")


@dataclass
class EnsembleModel:
    """Ordered base models plus how they were built.

    ``checkpoints`` maps an epoch to the list of base models as they were at
    the end of that epoch (same order as ``models``).
    """

    models: list
    kind: str = "deep"
    weights: np.ndarray = None
    member_index_union: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    seeds: list = field(default_factory=list)
    model_indices: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise ConfigError("an ensemble needs at least one model")
        if self.kind not in ENSEMBLE_KINDS:
            raise ConfigError(f"unknown ensemble kind {self.kind!r}")
        first = self.models[0]
        for m in self.models[1:]:
            if m.n_features != first.n_features or m.n_classes != first.n_classes:
                raise ConfigError("base models must share input dimension and class count")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if (
                self.weights.shape != (len(self.models),)
                or np.any(self.weights < 0)
                or abs(self.weights.sum() - 1.0) > 1e-9
            ):
                raise ConfigError("fusion weights must be a simplex vector, one per model")
        self.member_index_union = np.asarray(self.member_index_union, dtype=np.int64)

    @property
    def n_models(self):
        return len(self.models)

    @property
    def n_classes(self):
        return self.models[0].n_classes

    def prefix(self, n):
        """Sub-ensemble of the first ``n`` base models."""
        if not 1 <= n <= self.n_models:
            raise ConfigError(f"cannot take {n} of {self.n_models} models")
        weights = None
        if self.weights is not None:
            weights = self.weights[:n] / self.weights[:n].sum()
        idx = self.model_indices[:n]
        union = np.unique(np.concatenate(idx)) if idx else self.member_index_union
        return EnsembleModel(
            self.models[:n],
            self.kind,
            weights,
            union,
            self.seeds[:n],
            idx,
            {e: ms[:n] for e, ms in self.checkpoints.items()},
        )

    def at_epoch(self, epoch):
        """The ensemble made of the base models' checkpoints at ``epoch``."""
        if epoch not in self.checkpoints:
            raise ConfigError(f"no checkpoint retained for epoch {epoch}")
        return EnsembleModel(
            list(self.checkpoints[epoch]), self.kind, self.weights,
            self.member_index_union, self.seeds, self.model_indices,
        )

    def confidences(self, X):
        """Base-model outputs, shape ``(n_models, N, K)``."""
        return np.stack([m.forward(X) for m in self.models])

    def predict_proba(self, X, fusion="average"):
        return fuse(self.confidences(X), fusion, self.weights)


# -- training -----------------------------------------------------------------------


class Trainer:
    """Default base-model trainer: plain :func:`train_model` on the given rows.

    Trainers are called as ``trainer(X, y, indices, config, seed, n_classes)``
    with the full feature matrix, and ``for_shadow`` returns the trainer an
    attacker mirroring the victim would use for a shadow split.
    """

    def __call__(self, X, y, indices, config, seed, n_classes):
        return train_model(X[indices], y[indices], config, seed, n_classes=n_classes)

    def for_shadow(self, in_indices, out_indices):
        return self


def _fit_one(trainer, X, y, indices, config, seed, n_classes):
    with threadpool_limits(1):
        return trainer(X, y, indices, config, seed, n_classes)


def train_many(jobs, n_jobs=1):
    """Run ``(trainer, X, y, indices, config, seed, n_classes)`` jobs in order."""
    if n_jobs == 1 or len(jobs) <= 1:
        return [_fit_one(*job) for job in jobs]
    return Parallel(n_jobs=n_jobs)(delayed(_fit_one)(*job) for job in jobs)


def _check_n(n_models):
    if n_models < 1:
        raise ConfigError("n_models must be >= 1")


def _assemble(results, kind, seeds, index_sets, union, weights=None):
    return EnsembleModel(
        [r.model for r in results],
        kind,
        weights,
        union,
        list(seeds),
        [np.asarray(s, dtype=np.int64) for s in index_sets],
        {e: [r.checkpoints[e] for r in results] for e in results[0].checkpoints},
    )


def _train_on_sets(X, y, index_sets, config, seeds, n_classes, n_jobs, trainer):
    if n_classes is None:
        n_classes = int(np.max(y)) + 1
    trainer = trainer or Trainer()
    jobs = [(trainer, X, y, idx, config, s, n_classes) for idx, s in zip(index_sets, seeds)]
    return train_many(jobs, n_jobs)


def train_deep_ensemble(X, y, indices, n_models, config, seed=0, n_classes=None, n_jobs=1,
                        trainer=None):
    """``n_models`` randomly initialized networks trained on the same rows."""
    _check_n(n_models)
    indices = np.asarray(indices, dtype=np.int64)
    seeds = [derive_seed(seed, "deep", i) for i in range(n_models)]
    sets = [indices] * n_models
    results = _train_on_sets(X, y, sets, config, seeds, n_classes, n_jobs, trainer)
    return _assemble(results, "deep", seeds, sets, np.unique(indices))


def train_bagging(X, y, indices, n_models, config, seed=0, n_classes=None, n_jobs=1,
                  trainer=None):
    """Each model trains on its own bootstrap sample of ``indices``."""
    _check_n(n_models)
    sets = [bootstrap_sample(indices, derive_seed(seed, "bootstrap", i)) for i in range(n_models)]
    seeds = [derive_seed(seed, "bagging", i) for i in range(n_models)]
    results = _train_on_sets(X, y, sets, config, seeds, n_classes, n_jobs, trainer)
    return _assemble(results, "bagging", seeds, sets, np.unique(np.concatenate(sets)))


def train_partitioning(X, y, indices, n_models, config, seed=0, n_classes=None, n_jobs=1,
                       trainer=None):
    """Each model trains on one of ``n_models`` disjoint parts of ``indices``."""
    _check_n(n_models)
    indices = np.asarray(indices, dtype=np.int64)
    if n_models > indices.size:
        raise ConfigError(f"cannot partition {indices.size} samples into {n_models} parts")
    sets = partition_disjoint(indices, n_models, derive_seed(seed, "partition"))
    seeds = [derive_seed(seed, "partitioning", i) for i in range(n_models)]
    results = _train_on_sets(X, y, sets, config, seeds, n_classes, n_jobs, trainer)
    return _assemble(results, "partitioning", seeds, sets, np.unique(indices))


def train_snapshot_ensemble(X, y, indices, cycles, cycle_len, config, seed=0, n_classes=None,
                            trainer=None):
    """One cosine-annealed run; a snapshot is kept at the end of every cycle.

    The learning rate restarts at ``config.lr_schedule``'s base rate
    (``lr`` or ``lr_max``) every ``cycle_len`` epochs.
    """
    if cycles < 1 or cycle_len < 1:
        raise ConfigError("cycles and cycle_len must be >= 1")
    base = config.lr_schedule
    lr_max = getattr(base, "lr_max", getattr(base, "lr", 0.1))
    snap_epochs = tuple(cycle_len * (k + 1) for k in range(cycles))
    cfg = config.replace(
        epochs=cycles * cycle_len,
        lr_schedule=CyclicLR(lr_max, cycle_len),
        checkpoint_epochs=snap_epochs,
    )
    indices = np.asarray(indices, dtype=np.int64)
    run_seed = derive_seed(seed, "snapshot")
    if n_classes is None:
        n_classes = int(np.max(y)) + 1
    result = _fit_one(trainer or Trainer(), X, y, indices, cfg, run_seed, n_classes)
    models = [result.checkpoints[e] for e in snap_epochs]
    return EnsembleModel(
        models, "snapshot", None, np.unique(indices),
        [run_seed] * cycles, [indices] * cycles,
    )


def train_weighted(X, y, indices, n_models, config, seed=0, n_classes=None, n_jobs=1,
                   trainer=None, steps=200, lr=0.5):
    """Deep ensemble whose fusion weights are learned on the training rows."""
    ens = train_deep_ensemble(X, y, indices, n_models, config, seed, n_classes, n_jobs, trainer)
    ens.kind = "weighted"
    idx = np.asarray(indices, dtype=np.int64)
    ens.weights = learn_fusion_weights(
        ens.confidences(X[idx]), y[idx], steps, lr, derive_seed(seed, "weights")
    )
    return ens


def build_ensemble(kind, X, y, indices, n_models, config, seed=0, n_classes=None,
                   n_jobs=1, cycle_len=None, trainer=None):
    """Dispatch on ``kind``; for ``"snapshot"`` ``n_models`` is the cycle count."""
    args = (X, y, indices, n_models, config, seed, n_classes)
    if kind == "deep":
        return train_deep_ensemble(*args, n_jobs, trainer)
    if kind == "bagging":
        return train_bagging(*args, n_jobs, trainer)
    if kind == "partitioning":
        return train_partitioning(*args, n_jobs, trainer)
    if kind == "snapshot":
        cycle_len = cycle_len or max(1, config.epochs // max(n_models, 1))
        return train_snapshot_ensemble(X, y, indices, n_models, cycle_len, config, seed,
                                       n_classes, trainer)
    if kind == "weighted":
        return train_weighted(*args, n_jobs, trainer)
    raise ConfigError(f"unknown ensemble kind {kind!r}")


# -- predictions --------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    per_model_confidences: np.ndarray
    fused: np.ndarray
    fused_label: int
    true_label: int
    agreement_c: int
    misclassify_m: int
    is_member: bool


@dataclass
class PredictionSet:
    """Column-oriented predictions of an ensemble on a set of samples.

    ``agreement_c`` counts base models whose argmax equals the TRUE label,
    while agreed fusion rules compare against the ensemble's PREDICTED label.
    """

    sample_id: np.ndarray
    labels: np.ndarray
    per_model: np.ndarray
    fused: np.ndarray
    is_member: np.ndarray
    fusion: str = "average"
    n_fallback: int = 0

    @property
    def n_models(self):
        return self.per_model.shape[0]

    @property
    def fused_label(self):
        return np.argmax(self.fused, axis=1)

    @property
    def agreement_c(self):
        return np.sum(np.argmax(self.per_model, axis=2) == self.labels[None, :], axis=0)

    @property
    def misclassify_m(self):
        return self.n_models - self.agreement_c

    @property
    def correct(self):
        return self.fused_label == self.labels

    def __len__(self):
        return self.labels.shape[0]

    def records(self):
        c = self.agreement_c
        fl = self.fused_label
        for k in range(len(self)):
            yield PredictionRecord(
                int(self.sample_id[k]), self.per_model[:, k], self.fused[k], int(fl[k]),
                int(self.labels[k]), int(c[k]), int(self.n_models - c[k]), bool(self.is_member[k]),
            )

    def select(self, mask):
        mask = np.asarray(mask)
        return PredictionSet(
            self.sample_id[mask], self.labels[mask], self.per_model[:, mask],
            self.fused[mask], self.is_member[mask], self.fusion, self.n_fallback,
        )

    def with_fused(self, fused):
        return PredictionSet(
            self.sample_id, self.labels, self.per_model, np.asarray(fused),
            self.is_member, self.fusion, self.n_fallback,
        )

    def to_rows(self):
        """Rows of the prediction CSV schema."""
        fl, c, mx = self.fused_label, self.agreement_c, self.fused.max(axis=1)
        return [
            {
                "sample_id": int(self.sample_id[k]),
                "is_member": int(self.is_member[k]),
                "true_label": int(self.labels[k]),
                "fused_label": int(fl[k]),
                "fused_max_conf": repr(float(mx[k])),
                "agreement_c": int(c[k]),
            }
            for k in range(len(self))
        ]


PREDICTION_COLUMNS = ("sample_id", "is_member", "true_label", "fused_label", "fused_max_conf", "agreement_c")


def predict_all(ensemble, fusion, X, labels, is_member=None, sample_ids=None, post_fusion=None):
    """Evaluate every base model, fuse, and record agreement bookkeeping.

    Parameters
    ----------
    ensemble : EnsembleModel
    fusion : str
        One of :data:`~ensemble_privacy.fusion.FUSION_RULES`.
    X : ndarray of shape (N, d)
    labels : ndarray of shape (N,)
    is_member : ndarray of bool, optional
    sample_ids : ndarray of int, optional
    post_fusion : callable, optional
        Applied to the fused ``(N, K)`` matrix (e.g. a confidence mask).
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    if labels.shape != (n,):
        raise UsageError("one label per sample is required")
    per_model = ensemble.confidences(X)
    fused, n_fallback = fuse(per_model, fusion, ensemble.weights, return_fallback=True)
    if post_fusion is not None:
        fused = post_fusion(fused)
    return PredictionSet(
        np.arange(n) if sample_ids is None else np.asarray(sample_ids),
        labels,
        per_model,
        fused,
        np.zeros(n, dtype=bool) if is_member is None else np.asarray(is_member, dtype=bool),
        fusion,
        n_fallback,
    )


# -- estimator ----------------------------------------------------------------------


class EnsembleClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn style ensemble of :class:`MLPClassifier` base models.

    Parameters
    ----------
    base_estimator : MLPClassifier, optional
        Template whose hyper-parameters every base model uses.
    n_models : int, default=5
        Number of base models (number of cycles for ``kind="snapshot"``).
    kind : {"deep", "bagging", "partitioning", "snapshot", "weighted"}
    fusion : str, default="average"
    cycle_len : int, optional
        Snapshot cycle length in epochs.
    n_jobs : int, default=1
    random_state : int, default=0
    """

    def __init__(self, base_estimator=None, n_models=5, kind="deep", fusion="average",
                 cycle_len=None, n_jobs=1, random_state=0):
        self.base_estimator = base_estimator
        self.n_models = n_models
        self.kind = kind
        self.fusion = fusion
        self.cycle_len = cycle_len
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        base = clone(self.base_estimator) if self.base_estimator is not None else MLPClassifier()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.ensemble_ = build_ensemble(
            self.kind, X, encoded, np.arange(X.shape[0]), self.n_models,
            base.train_config(), self.random_state, len(self.classes_), self.n_jobs,
            self.cycle_len,
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "ensemble_")
        X = check_array(X, dtype=np.float64)
        return self.ensemble_.predict_proba(X, self.fusion)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# -- serialization ------------------------------------------------------------------


def save_ensemble(ensemble, directory, name):
    """Write base models and a JSON manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for i, model in enumerate(ensemble.models):
        fname = f"{name}_model{i}.json"
        with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
            fh.write(model.to_json())
        files.append(fname)
    manifest = {
        "kind": ensemble.kind,
        "model_files": files,
        "weights": None if ensemble.weights is None else ensemble.weights.tolist(),
        "seeds": [int(s) for s in ensemble.seeds],
        "member_index_union": ensemble.member_index_union.tolist(),
        "model_indices": [np.asarray(s).tolist() for s in ensemble.model_indices],
    }
    path = os.path.join(directory, f"{name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return path


def load_ensemble(manifest_path):
    directory = os.path.dirname(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    models = []
    for fname in manifest["model_files"]:
        with open(os.path.join(directory, fname), encoding="utf-8") as fh:
            models.append(MLPModel.from_json(fh.read()).freeze())
    return EnsembleModel(
        models,
        manifest["kind"],
        manifest["weights"],
        manifest["member_index_union"],
        manifest["seeds"],
        [np.asarray(s, dtype=np.int64) for s in manifest["model_indices"]],
    )
