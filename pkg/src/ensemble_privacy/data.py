"""Datasets and the membership split discipline.

Every sampler here is a pure function of its inputs and seed.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ParseError, UsageError

SPLIT_MODES = ("disjoint", "known80")


@dataclass
class LabeledDataset:
    """Feature matrix with dense integer labels.

    Attributes
    ----------
    features : ndarray of shape (N, d)
    labels : ndarray of shape (N,)
        Integers in ``[0, n_classes)``.
    feature_range : ndarray of shape (d, 2)
        Per-column ``(min, max)`` recorded at load/generation time.
    label_names : list of str
        ``label_names[k]`` is the original label of class ``k``.
    feature_names : list of str
    label_column : str
    """

    features: np.ndarray
    labels: np.ndarray
    feature_range: np.ndarray = None
    label_names: list = None
    feature_names: list = None
    label_column: str = "label"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise UsageError("dataset needs at least one row of features")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("one label per row is required")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features contain non-finite values")
        if self.labels.min() < 0:
            raise UsageError("labels must be non-negative")
        if self.feature_range is None:
            self.feature_range = np.stack(
                [self.features.min(axis=0), self.features.max(axis=0)], axis=1
            )
        if self.label_names is None:
            self.label_names = [str(k) for k in range(int(self.labels.max()) + 1)]
        if self.labels.max() >= len(self.label_names):
            raise UsageError("labels exceed the declared class count")
        if self.feature_names is None:
            self.feature_names = [f"x{j}" for j in range(self.features.shape[1])]

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return len(self.label_names)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return self.features[indices], self.labels[indices]


@dataclass
class SplitPlan:
    """Index sets of the victim training data, attacker pool and test data.

    In ``"disjoint"`` mode the attacker trains shadows on ``shadow_pool``.
    In ``"known80"`` mode the shadow pool is empty; instead the attacker is
    handed ``known_members`` (a subset of ``victim_train``) and
    ``known_nonmembers`` (a subset of ``test``) with their membership status,
    and membership is inferred for the remaining samples.
    """

    victim_train: np.ndarray
    shadow_pool: np.ndarray
    test: np.ndarray
    seed: int = 0
    mode: str = "disjoint"
    known_members: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    known_nonmembers: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    def __post_init__(self):
        for name in ("victim_train", "shadow_pool", "test", "known_members", "known_nonmembers"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"unknown split mode {self.mode!r}")
        sets = [set(self.victim_train.tolist()), set(self.shadow_pool.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise UsageError("victim_train, shadow_pool and test must be pairwise disjoint")
        if not set(self.known_members.tolist()) <= sets[0]:
            raise UsageError("known_members must be drawn from victim_train")
        if not set(self.known_nonmembers.tolist()) <= sets[2]:
            raise UsageError("known_nonmembers must be drawn from test")

    def is_member(self, indices):
        """Membership ground truth: True iff the index is in ``victim_train``."""
        return np.isin(np.asarray(indices), self.victim_train)

    @property
    def attacker_pool(self):
        """Samples the attacker may train shadow/calibration models on."""
        if self.mode == "known80":
            return np.concatenate([self.known_members, self.known_nonmembers])
        return self.shadow_pool

    def eval_members(self):
        if self.mode == "known80":
            return np.setdiff1d(self.victim_train, self.known_members)
        return self.victim_train

    def eval_nonmembers(self):
        if self.mode == "known80":
            return np.setdiff1d(self.test, self.known_nonmembers)
        return self.test

    def to_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "victim_train": self.victim_train.tolist(),
            "shadow_pool": self.shadow_pool.tolist(),
            "test": self.test.tolist(),
            "known_members": self.known_members.tolist(),
            "known_nonmembers": self.known_nonmembers.tolist(),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generate_gaussian_mixture(
    n_classes, n_features, per_class_train, per_class_test, class_separation, seed=0
):
    """Isotropic Gaussian classes with means on a sphere of radius ``class_separation``.

    Rows ``[0, K * per_class_train)`` form the train portion and the rest the
    test portion. Returns the dataset and a default disjoint split with half of
    the train portion assigned to the victim and half to the attacker.
    """
    if n_classes < 2 or n_features < 2 or per_class_train < 2 or per_class_test < 0:
        raise ConfigError("need K >= 2, d >= 2, n >= 2 and m >= 0")
    if class_separation < 0:
        raise ConfigError("class_separation must be >= 0")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_classes, n_features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions

    def draw(per_class):
        labels = np.repeat(np.arange(n_classes), per_class)
        feats = means[labels] + rng.standard_normal((labels.size, n_features))
        return feats, labels

    x_tr, y_tr = draw(per_class_train)
    x_te, y_te = draw(per_class_test)
    dataset = LabeledDataset(np.vstack([x_tr, x_te]), np.concatenate([y_tr, y_te]),
                             label_names=[str(k) for k in range(n_classes)])
    train_rows = np.arange(y_tr.size)
    test_rows = np.arange(y_tr.size, y_tr.size + y_te.size)
    plan = make_split(dataset, (0.5, 0.5), seed, train_indices=train_rows, test_indices=test_rows)
    return dataset, plan


def make_split(
    dataset,
    fractions=(0.5, 0.5),
    seed=0,
    *,
    train_indices=None,
    test_indices=None,
    test_fraction=0.2,
    mode="disjoint",
    known_fraction=0.8,
):
    """Seeded split of a dataset into victim-train, shadow-pool and test sets.

    Parameters
    ----------
    dataset : LabeledDataset or int
        The dataset (or its row count).
    fractions : (float, float)
        Fractions of the train portion given to the victim and to the shadow
        pool; must sum to at most 1.
    train_indices, test_indices : array-like, optional
        Explicit train/test portions. When omitted, ``test_fraction`` of the
        shuffled rows becomes the test portion.
    mode : {"disjoint", "known80"}
        In ``"known80"`` mode the victim trains on the whole train portion and
        ``known_fraction`` of both members and test rows are revealed to the
        attacker; ``fractions`` is ignored.
    """
    n_rows = dataset if isinstance(dataset, (int, np.integer)) else dataset.n_samples
    rng = np.random.default_rng(seed)
    if train_indices is None:
        order = rng.permutation(n_rows)
        n_test = int(round(test_fraction * n_rows))
        test_indices = np.sort(order[:n_test]) if test_indices is None else test_indices
        train_indices = np.setdiff1d(order, test_indices)
    if test_indices is None:
        test_indices = np.setdiff1d(np.arange(n_rows), train_indices)
    train_indices = np.asarray(train_indices, dtype=np.int64)
    test_indices = np.asarray(test_indices, dtype=np.int64)

    if mode == "known80":
        if not 0 <= known_fraction <= 1:
            raise ConfigError("known_fraction must lie in [0, 1]")
        members = rng.permutation(train_indices)
        nonmembers = rng.permutation(test_indices)
        return SplitPlan(
            victim_train=np.sort(members),
            shadow_pool=np.array([], dtype=np.int64),
            test=np.sort(nonmembers),
            seed=seed,
            mode=mode,
            known_members=np.sort(members[: int(round(known_fraction * members.size))]),
            known_nonmembers=np.sort(nonmembers[: int(round(known_fraction * nonmembers.size))]),
        )

    f_tr, f_s = fractions
    if f_tr < 0 or f_s < 0 or f_tr + f_s > 1 + 1e-12:
        raise ConfigError("split fractions must be >= 0 and sum to at most 1")
    shuffled = rng.permutation(train_indices)
    n_tr = int(round(f_tr * shuffled.size))
    n_s = min(int(round(f_s * shuffled.size)), shuffled.size - n_tr)
    return SplitPlan(
        victim_train=np.sort(shuffled[:n_tr]),
        shadow_pool=np.sort(shuffled[n_tr:n_tr + n_s]),
        test=np.sort(test_indices),
        seed=seed,
        mode=mode,
    )


def bootstrap_sample(indices, seed=0):
    """Sample ``len(indices)`` indices with replacement."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return indices.copy()
    rng = np.random.default_rng(seed)
    return rng.choice(indices, size=indices.size, replace=True)


def partition_disjoint(indices, n_parts, seed=0):
    """Shuffle and cut into ``n_parts`` disjoint parts whose sizes differ by at most one."""
    indices = np.asarray(indices, dtype=np.int64)
    if n_parts < 1:
        raise ConfigError("n_parts must be >= 1")
    if n_parts == 1:
        return [indices.copy()]
    rng = np.random.default_rng(seed)
    return [np.sort(part) for part in np.array_split(rng.permutation(indices), n_parts)]


# -- CSV ------------------------------------------------------------------------------


def load_csv(path, label_column):
    """Read a header-first, comma separated UTF-8 file.

    Labels are mapped to ``0..K-1`` in order of first appearance; every other
    column must be numeric.

    Raises
    ------
    ParseError
        On an unknown label column, ragged rows or non-numeric feature cells;
        the message cites the 1-based line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, header row required", line=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"unknown label column {label_column!r}", line=1)
        label_pos = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_pos]
        label_ids = {}
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", line=line
                )
            feats = []
            for i, cell in enumerate(row):
                if i == label_pos:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {cell!r} in column {header[i]!r}", line=line
                    ) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite value in column {header[i]!r}", line=line)
                feats.append(value)
            name = row[label_pos].strip()
            labels.append(label_ids.setdefault(name, len(label_ids)))
            rows.append(feats)
    if not rows:
        raise ParseError("no data rows", line=2)
    return LabeledDataset(
        np.array(rows, dtype=np.float64),
        np.array(labels, dtype=np.int64),
        label_names=list(label_ids),
        feature_names=feature_names,
        label_column=label_column,
    )


def write_csv(dataset, path):
    """Write ``dataset`` in the format :func:`load_csv` reads."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*dataset.feature_names, dataset.label_column])
        for feats, label in zip(dataset.features, dataset.labels):
            writer.writerow([*(repr(float(v)) for v in feats), dataset.label_names[label]])


def balanced_eval_indices(plan, seed=0, max_per_group=None):
    """Equal numbers of members and nonmembers for attack evaluation.

    The larger group is subsampled (seeded) down to the smaller one, and both
    are capped at ``max_per_group`` when given.

    Returns
    -------
    indices : ndarray
        Members first, then nonmembers, each block sorted.
    is_member : ndarray of bool
    """
    members, nonmembers = plan.eval_members(), plan.eval_nonmembers()
    size = min(members.size, nonmembers.size)
    if max_per_group is not None:
        size = min(size, max_per_group)
    rng = np.random.default_rng(seed)
    chosen_m = np.sort(rng.choice(members, size, replace=False)) if size < members.size else members
    chosen_n = np.sort(rng.choice(nonmembers, size, replace=False)) if size < nonmembers.size else nonmembers
    indices = np.concatenate([chosen_m, chosen_n])
    return indices, np.concatenate([np.ones(size, bool), np.zeros(size, bool)])
