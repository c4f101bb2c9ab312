"""Black-box membership-inference attacks against ensembles.

Attacks only consume the ensemble's published (fused) confidence vectors or
predicted labels; none of them read training internals of the target.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import derive_seed
from .ensemble import build_ensemble
from .exceptions import ConfigError, UnavailableAttackError
from .fusion import fuse
from .metrics import roc_auc
from .nn import MLPModel, one_hot
from .training import ConstantLR, TrainConfig, train_model

ATTACKS = ("gap", "shokri", "watson", "sampling")
SCORE_COLUMNS = ("sample_id", "is_member", "score", "attack", "sigma")


@dataclass
class AttackScoreSet:
    """Per-sample membership scores; higher means more likely a member."""

    sample_id: np.ndarray
    scores: np.ndarray
    is_member: np.ndarray
    attack: str
    target: str = ""
    sigma: float = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_id = np.asarray(self.sample_id)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_member = np.asarray(self.is_member, dtype=bool)
        if not (self.sample_id.shape == self.scores.shape == self.is_member.shape):
            raise ConfigError("sample_id, scores and is_member must align")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigError("attack scores must be finite")

    def to_csv(self, path):
        sigma = "" if self.sigma is None else repr(float(self.sigma))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SCORE_COLUMNS)
            for sid, member, score in zip(self.sample_id, self.is_member, self.scores):
                writer.writerow([int(sid), int(member), repr(float(score)), self.attack, sigma])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        sigma = rows[0]["sigma"] if rows else ""
        return cls(
            [int(r["sample_id"]) for r in rows],
            [float(r["score"]) for r in rows],
            [r["is_member"] == "1" for r in rows],
            rows[0]["attack"] if rows else "",
            sigma=float(sigma) if sigma else None,
        )


def gap_attack(predictions):
    """Score 1 for correctly classified samples, 0 otherwise."""
    return AttackScoreSet(
        predictions.sample_id,
        predictions.correct.astype(np.float64),
        predictions.is_member,
        "gap",
    )


# -- shadow models ------------------------------------------------------------------


@dataclass
class Shadow:
    target: object
    in_indices: np.ndarray
    out_indices: np.ndarray


@dataclass
class ShadowSet:
    """Shadow targets built like the victim on halves of the attacker pool."""

    shadows: list
    config: TrainConfig
    kind: str = "deep"
    n_models: int = 1

    def __len__(self):
        return len(self.shadows)

    def view(self, n_models=None, epoch=None):
        """Shadow targets restricted to ``n_models`` base models at ``epoch``."""
        out = []
        for s in self.shadows:
            target = s.target if n_models is None else s.target.prefix(n_models)
            if epoch is not None:
                target = target.at_epoch(epoch)
            out.append(Shadow(target, s.in_indices, s.out_indices))
        return out


def _build_shadow(X, y, pool, config, seed, kind, n_models, n_classes, cycle_len, trainer):
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(pool)
    half = order.size // 2
    in_idx, out_idx = np.sort(order[:half]), np.sort(order[half:])
    if trainer is not None:
        trainer = trainer.for_shadow(in_idx, out_idx)
    target = build_ensemble(kind, X, y, in_idx, n_models, config, derive_seed(seed, "model"),
                            n_classes, cycle_len=cycle_len, trainer=trainer)
    return Shadow(target, in_idx, out_idx)


def train_shadows(X, y, pool, k, config, seed=0, kind="deep", n_models=1, n_classes=None,
                  n_jobs=1, cycle_len=None, trainer=None):
    """Train ``k`` shadow targets, each on a random half of ``pool``.

    Each shadow mirrors the victim's construction (``kind``, ``n_models`` and
    training ``config``); the other half of the pool is its out-set.

    Raises
    ------
    ConfigError
        If ``len(pool) < 2 * k``.
    """
    pool = np.asarray(pool, dtype=np.int64)
    if k < 1:
        raise ConfigError("at least one shadow model is required")
    if pool.size == 0:
        raise UnavailableAttackError("the attacker has no shadow data")
    if pool.size < 2 * k:
        raise ConfigError(f"shadow pool of {pool.size} samples is too small for {k} shadows")
    if n_classes is None:
        n_classes = int(np.max(y)) + 1
    seeds = [derive_seed(seed, "shadow", i) for i in range(k)]
    rest = (kind, n_models, n_classes, cycle_len, trainer)
    if n_jobs == 1:
        shadows = [_build_shadow(X, y, pool, config, s, *rest) for s in seeds]
    else:
        shadows = Parallel(n_jobs=n_jobs)(
            delayed(_build_shadow)(X, y, pool, config, s, *rest) for s in seeds
        )
    return ShadowSet(shadows, config, kind, n_models)


def attack_features(fused, labels, n_classes):
    """Confidence vector concatenated with the one-hot true label."""
    fused = np.asarray(fused, dtype=np.float64)
    return np.hstack([fused, one_hot(np.asarray(labels, dtype=np.int64), n_classes)])


def build_attack_dataset(shadows, X, y, fusion="average", post_fusion=None):
    """Labeled rows for the attack classifier from shadow in/out samples.

    Parameters
    ----------
    shadows : ShadowSet or list of Shadow
    X, y : full feature matrix and labels the shadow indices refer to
    fusion : str
        Fusion rule the shadows publish with (mirrors the victim).
    post_fusion : callable, optional
        Output transformation mirroring a deployed confidence mask.

    Returns
    -------
    features : ndarray of shape (rows, 2K)
    membership : ndarray of shape (rows,)
    """
    if isinstance(shadows, ShadowSet):
        shadows = shadows.shadows
    feats, member = [], []
    for s in shadows:
        n_classes = s.target.n_classes
        for idx, flag in ((s.in_indices, 1), (s.out_indices, 0)):
            fused = fuse(s.target.confidences(X[idx]), fusion, s.target.weights)
            if post_fusion is not None:
                fused = post_fusion(fused)
            feats.append(attack_features(fused, y[idx], n_classes))
            member.append(np.full(idx.size, flag, dtype=np.int64))
    return np.vstack(feats), np.concatenate(member)


class ShokriAttack(BaseEstimator, ClassifierMixin):
    """Attack classifier: predicts membership from ``[confidence, one-hot label]``.

    Parameters
    ----------
    hidden_sizes : tuple of int, default=(128, 128, 64)
    epochs : int, default=80
    batch_size : int, default=64
    learning_rate : float, default=0.05
    random_state : int, default=0
    """

    def __init__(self, hidden_sizes=(128, 128, 64), epochs=80, batch_size=64,
                 learning_rate=0.05, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_schedule=ConstantLR(self.learning_rate),
            seed=self.random_state,
            hidden_sizes=tuple(self.hidden_sizes),
        )
        self.model_ = train_model(X, y.astype(np.int64), config, n_classes=2).model
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained 2-class :class:`MLPModel`."""
        attack = cls(hidden_sizes=model.layer_sizes[1:-1])
        attack.model_ = model
        attack.classes_ = np.array([0, 1])
        attack.n_features_in_ = model.n_features
        return attack

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.forward(check_array(X, dtype=np.float64))

    def member_score(self, fused, labels):
        """Member-class probability for published confidences and true labels."""
        n_classes = np.asarray(fused).shape[1]
        return self.predict_proba(attack_features(fused, labels, n_classes))[:, 1]


def shokri_attack(predictions, attack_model):
    """Score the target's fused outputs with a trained attack classifier."""
    scores = attack_model.member_score(predictions.fused, predictions.labels)
    return AttackScoreSet(predictions.sample_id, scores, predictions.is_member, "shokri")


def watson_attack(predictions, X, attack_model, calibration, fusion="average", post_fusion=None):
    """Difficulty-calibrated score: target score minus the mean shadow score.

    Parameters
    ----------
    predictions : PredictionSet
        Target outputs on the evaluated samples.
    X : ndarray of shape (N, d)
        The same samples' features, queried on the calibration shadows.
    attack_model : ShokriAttack
        Supplies the base score for every model output.
    calibration : list of EnsembleModel or Shadow
        Shadow targets trained without the evaluated samples.
    """
    if not calibration:
        raise UnavailableAttackError("Watson calibration needs at least one shadow model")
    base = attack_model.member_score(predictions.fused, predictions.labels)
    reference = np.zeros_like(base)
    for shadow in calibration:
        target = getattr(shadow, "target", shadow)
        fused = fuse(target.confidences(X), fusion, target.weights)
        if post_fusion is not None:
            fused = post_fusion(fused)
        reference += attack_model.member_score(fused, predictions.labels)
    scores = base - reference / len(calibration)
    return AttackScoreSet(predictions.sample_id, scores, predictions.is_member, "watson")


def default_sigma_grid():
    """Ten log-spaced noise scales in [1e-3, 1], relative to each feature's range."""
    return np.logspace(-3, 0, 10)


def label_flip_counts(predict_labels, X, reference_labels, sigma, k_perturb, feature_range, rng):
    """Count perturbed copies whose predicted label differs from the reference.

    Noise for sample ``i`` and copy ``j`` is ``noise[i, j]`` of one
    ``(N, k_perturb, d)`` standard-normal draw, scaled per feature by
    ``sigma * (max - min)`` and clipped to ``feature_range``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    noise = rng.standard_normal((n, k_perturb, d))
    lo, hi = feature_range[:, 0], feature_range[:, 1]
    scale = sigma * (hi - lo)
    perturbed = np.clip(X[:, None, :] + noise * scale, lo, hi)
    labels = predict_labels(perturbed.reshape(n * k_perturb, d)).reshape(n, k_perturb)
    return np.sum(labels != np.asarray(reference_labels)[:, None], axis=1)


def sampling_attack(ensemble, fusion, X, is_member, feature_range, k_perturb=50, sigmas=None,
                    seed=0, sample_ids=None):
    """Label-stability attack: score = ``k_perturb`` minus label flips.

    Every noise scale in ``sigmas`` is tried; the returned set is the one with
    the highest AUC and carries its ``sigma``. ``extras["auc_by_sigma"]``
    lists all scales.
    """
    if k_perturb <= 0:
        raise ConfigError("k_perturb must be positive")
    sigmas = default_sigma_grid() if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    feature_range = np.asarray(feature_range, dtype=np.float64)
    ids = np.arange(X.shape[0]) if sample_ids is None else np.asarray(sample_ids)

    def predict_labels(Z):
        return np.argmax(fuse(ensemble.confidences(Z), fusion, ensemble.weights), axis=1)

    reference = predict_labels(X)
    rng = np.random.default_rng(seed)
    best, aucs = None, {}
    for sigma in sigmas:
        flips = label_flip_counts(predict_labels, X, reference, sigma, k_perturb, feature_range, rng)
        result = AttackScoreSet(ids, k_perturb - flips, is_member, "sampling", sigma=float(sigma))
        aucs[float(sigma)] = roc_auc(result)
        if best is None or aucs[float(sigma)] > aucs[best.sigma]:
            best = result
    best.extras["auc_by_sigma"] = aucs
    return best


def zero_attack_model(n_classes, hidden_sizes=(128, 128, 64)):
    """Attack classifier with all-zero parameters (uniform 0.5 scores)."""
    return ShokriAttack.from_model(MLPModel.zeros((2 * n_classes, *hidden_sizes, 2)))
