"""Configuration-driven experiment runs: train, attack, measure and persist.

A run sweeps every cell of ``ensemble kind x n x fusion x defense x epoch``
and writes one report row per (cell, attack). Models for a cell family are
trained once at the largest ``n`` and smaller ensembles are prefixes of it
(partitioning is the exception: its parts depend on ``n``, so every ``n``
is trained separately). All randomness comes from seeds derived from the
master seed and a stable task key, so outputs do not depend on thread count.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import time
import traceback
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from ._rng import derive_seed
from .attacks import (
    ATTACKS,
    AttackScoreSet,
    ShokriAttack,
    build_attack_dataset,
    gap_attack,
    sampling_attack,
    shokri_attack,
    train_shadows,
    watson_attack,
)
from .data import SplitPlan, balanced_eval_indices, generate_gaussian_mixture, load_csv, make_split
from .defenses import MemGuardRandom, MMDConfig, MMDMixupTrainer
from .ensemble import (
    ENSEMBLE_KINDS,
    PREDICTION_COLUMNS,
    build_ensemble,
    load_ensemble,
    predict_all,
    save_ensemble,
)
from .exceptions import ConfigError, EnsemblePrivacyError
from .fusion import FUSION_RULES
from .metrics import REPORT_FPRS, confidence_distortion, js_divergence, roc_auc, tpr_at_fpr
from .training import DPConfig, TrainConfig

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "dataset", "ensemble_kind", "n_models", "fusion", "defense", "epochs", "train_acc",
    "test_acc", "attack", "auc", "tpr_fpr_0_001", "tpr_fpr_0_1", "distortion", "js_div",
    "split_mode", "seed",
)
METRICS = ("accuracy", "auc", "tpr", "distortion", "js_div")
DEFENSES = ("none", "memguard", "dp", "l1", "l2", "mmd_mixup")
SPLIT_MODES = ("disjoint", "known80")

_DEFENSE_PARAMS = {
    "none": {},
    "memguard": {"noise_magnitude": 0.1},
    "dp": {"clip_norm": 1.0, "noise_multiplier": 1.0, "delta": 1e-5},
    "l1": {"weight": 1e-4},
    "l2": {"weight": 1e-3},
    "mmd_mixup": {"bandwidth": 1.0, "weight": 1.0, "reference_batch_size": 32,
                  "mixup_alpha": 1.0},
}
_ATTACK_PARAMS = {
    "gap": {},
    "shokri": {},
    "watson": {},
    "sampling": {"k_perturb": 50, "sigmas": None},
}


def _strict(payload, allowed, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return payload


def _positive_int(value, where):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{where} must be a positive integer")
    return value


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Either generator parameters or a CSV file with a label column."""

    name: str = "gaussian"
    generator: dict = None
    csv_path: str = None
    label_column: str = None
    test_fraction: float = 0.2

    _GENERATOR_KEYS = ("n_classes", "n_features", "per_class_train", "per_class_test",
                       "class_separation")

    @classmethod
    def from_dict(cls, payload):
        _strict(payload, ("name", "generator", "csv", "label_column", "test_fraction"), "dataset")
        gen, path = payload.get("generator"), payload.get("csv")
        if (gen is None) == (path is None):
            raise ConfigError("dataset needs exactly one of 'generator' or 'csv'")
        if gen is not None:
            _strict(gen, cls._GENERATOR_KEYS, "dataset.generator")
            missing = [k for k in cls._GENERATOR_KEYS if k not in gen]
            if missing:
                raise ConfigError(f"dataset.generator is missing {', '.join(missing)}")
            gen = dict(gen)
        else:
            if not os.path.isfile(path):
                raise ConfigError(f"dataset file {path!r} does not exist")
            if not payload.get("label_column"):
                raise ConfigError("a CSV dataset needs 'label_column'")
        test_fraction = float(payload.get("test_fraction", 0.2))
        if not 0 < test_fraction < 1:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")
        return cls(payload.get("name", "gaussian" if gen else os.path.basename(path)),
                   gen, path, payload.get("label_column"), test_fraction)

    def to_dict(self):
        out = {"name": self.name, "test_fraction": self.test_fraction}
        if self.generator is not None:
            out["generator"] = dict(self.generator)
        else:
            out["csv"] = self.csv_path
            out["label_column"] = self.label_column
        return out


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "disjoint"
    fractions: tuple = (0.5, 0.5)
    known_fraction: float = 0.8
    reference_fraction: float = 0.0
    max_eval_per_group: int = None

    @classmethod
    def from_dict(cls, payload):
        _strict(payload, [f.name for f in dataclasses.fields(cls)], "split")
        spec = cls(**{**payload, "fractions": tuple(payload.get("fractions", (0.5, 0.5)))})
        if spec.mode not in SPLIT_MODES:
            raise ConfigError(f"split.mode must be one of {SPLIT_MODES}")
        if len(spec.fractions) != 2:
            raise ConfigError("split.fractions must have two entries")
        if not 0 <= spec.reference_fraction < 1:
            raise ConfigError("split.reference_fraction must lie in [0, 1)")
        if spec.max_eval_per_group is not None:
            _positive_int(spec.max_eval_per_group, "split.max_eval_per_group")
        return spec

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["fractions"] = list(self.fractions)
        return out


@dataclass(frozen=True)
class EnsembleSpec:
    kind: str
    n_models: tuple = (1, 2, 5, 10)
    fusions: tuple = ("average",)
    cycle_len: int = None

    @classmethod
    def from_dict(cls, payload):
        _strict(payload, ("kind", "n_models", "fusions", "cycle_len"), "ensembles[]")
        kind = payload.get("kind")
        if kind not in ENSEMBLE_KINDS:
            raise ConfigError(f"ensemble kind must be one of {ENSEMBLE_KINDS}, got {kind!r}")
        ns = tuple(_positive_int(n, "n_models") for n in payload.get("n_models", (1, 2, 5, 10)))
        fusions = tuple(payload.get("fusions", ("average",)))
        if not ns or not fusions:
            raise ConfigError("each ensemble needs at least one n and one fusion rule")
        for rule in fusions:
            if rule not in FUSION_RULES:
                raise ConfigError(f"unknown fusion rule {rule!r}")
        if "weighted" in fusions and kind != "weighted":
            raise ConfigError("weighted fusion needs an ensemble of kind 'weighted'")
        cycle_len = payload.get("cycle_len")
        if cycle_len is not None:
            _positive_int(cycle_len, "cycle_len")
        return cls(kind, ns, fusions, cycle_len)

    def to_dict(self):
        return {"kind": self.kind, "n_models": list(self.n_models),
                "fusions": list(self.fusions), "cycle_len": self.cycle_len}


@dataclass(frozen=True)
class NamedSpec:
    """A defense or attack: a name, its parameters and a report label."""

    name: str
    params: dict = field(default_factory=dict)
    label: str = ""

    @classmethod
    def parse(cls, payload, defaults, where):
        if isinstance(payload, str):
            payload = {"name": payload}
        if not isinstance(payload, dict):
            raise ConfigError(f"{where} entries must be names or JSON objects")
        name = payload.get("name")
        if name not in defaults:
            raise ConfigError(f"{where}: unknown name {name!r}; expected one of {tuple(defaults)}")
        _strict(payload, ("name", "label", *defaults[name]), where)
        params = {**defaults[name],
                  **{k: v for k, v in payload.items() if k not in ("name", "label")}}
        label = payload.get("label") or _default_label(name, params, defaults[name])
        return cls(name, params, label)

    def to_dict(self):
        return {"name": self.name, "label": self.label, **self.params}


def _default_label(name, params, defaults):
    changed = [f"{k}={params[k]}" for k in sorted(params) if params[k] != defaults.get(k)]
    return f"{name}({','.join(changed)})" if changed else name


@dataclass(frozen=True)
class AttackModelSpec:
    hidden_sizes: tuple = (128, 128, 64)
    epochs: int = 80
    batch_size: int = 64
    learning_rate: float = 0.05
    n_shadows: int = 10
    n_calibration: int = 10

    @classmethod
    def from_dict(cls, payload):
        _strict(payload, [f.name for f in dataclasses.fields(cls)], "attack_model")
        spec = cls(**{**payload, "hidden_sizes": tuple(payload.get("hidden_sizes", (128, 128, 64)))})
        for name in ("epochs", "batch_size", "n_shadows", "n_calibration"):
            _positive_int(getattr(spec, name), f"attack_model.{name}")
        if not spec.learning_rate > 0:
            raise ConfigError("attack_model.learning_rate must be > 0")
        return spec

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out

    def estimator(self, seed):
        return ShokriAttack(self.hidden_sizes, self.epochs, self.batch_size,
                            self.learning_rate, seed)


_TOP_KEYS = ("dataset", "split", "model", "train", "ensembles", "defenses", "attacks",
             "attack_model", "eval_epochs", "metrics", "output_dir", "seed", "n_jobs")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; build with :meth:`from_dict` or :meth:`load`."""

    dataset: DatasetSpec
    ensembles: tuple
    attacks: tuple
    split: SplitSpec = SplitSpec()
    train: TrainConfig = TrainConfig()
    defenses: tuple = (NamedSpec("none", {}, "none"),)
    attack_model: AttackModelSpec = AttackModelSpec()
    eval_epochs: tuple = ()
    metrics: tuple = METRICS
    output_dir: str = "out"
    seed: int = 0
    n_jobs: int = 1

    @classmethod
    def from_dict(cls, payload):
        _strict(payload, _TOP_KEYS, "config")
        for key in ("dataset", "ensembles", "attacks"):
            if key not in payload:
                raise ConfigError(f"config is missing {key!r}")
        model = _strict(payload.get("model", {}), ("hidden_sizes", "activation"), "model")
        train_payload = dict(payload.get("train", {}))
        for key in ("hidden_sizes", "activation", "checkpoint_epochs", "dp", "seed"):
            if key in train_payload:
                raise ConfigError(f"train.{key} is not configurable here; see model/defenses/seed")
        if "hidden_sizes" in model:
            train_payload["hidden_sizes"] = list(model["hidden_sizes"])
        if "activation" in model:
            train_payload["activation"] = model["activation"]
        train = TrainConfig.from_dict(train_payload)
        if train.activation not in ("relu", "tanh"):
            raise ConfigError("model.activation must be 'relu' or 'tanh'")

        ensembles = tuple(EnsembleSpec.from_dict(e) for e in payload["ensembles"])
        attacks = tuple(NamedSpec.parse(a, _ATTACK_PARAMS, "attacks[]") for a in payload["attacks"])
        defenses = tuple(NamedSpec.parse(d, _DEFENSE_PARAMS, "defenses[]")
                         for d in payload.get("defenses", ["none"]))
        if not ensembles or not attacks or not defenses:
            raise ConfigError("at least one ensemble, one attack and one defense are required")
        for group, what in ((attacks, "attack"), (defenses, "defense")):
            labels = [s.label for s in group]
            if len(set(labels)) != len(labels):
                raise ConfigError(f"duplicate {what} labels: {labels}")
        eval_epochs = tuple(_positive_int(e, "eval_epochs") for e in payload.get("eval_epochs", ()))
        if any(e > train.epochs for e in eval_epochs):
            raise ConfigError("eval_epochs must not exceed train.epochs")
        metrics = tuple(payload.get("metrics", METRICS))
        bad = sorted(set(metrics) - set(METRICS))
        if bad:
            raise ConfigError(f"unknown metrics {bad}; expected a subset of {METRICS}")
        seed = payload.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        config = cls(
            dataset=DatasetSpec.from_dict(payload["dataset"]),
            ensembles=ensembles,
            attacks=attacks,
            split=SplitSpec.from_dict(payload.get("split", {})),
            train=train,
            defenses=defenses,
            attack_model=AttackModelSpec.from_dict(payload.get("attack_model", {})),
            eval_epochs=eval_epochs,
            metrics=metrics,
            output_dir=str(payload.get("output_dir", "out")),
            seed=seed,
            n_jobs=_positive_int(payload.get("n_jobs", 1), "n_jobs"),
        )
        config._check_consistency()
        return config

    def _check_consistency(self):
        for d in self.defenses:
            try:
                _defense_train_config(self.train, d)
                if d.name == "memguard" and not float(d.params["noise_magnitude"]) >= 0:
                    raise ConfigError("memguard noise_magnitude must be >= 0")
                if d.name == "mmd_mixup":
                    _mmd_config(d)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"defense {d.label!r}: {exc}") from exc
            if d.name == "mmd_mixup" and self.split.reference_fraction == 0:
                raise ConfigError("mmd_mixup needs split.reference_fraction > 0")
        for a in self.attacks:
            if a.name == "sampling":
                _positive_int(a.params["k_perturb"], "sampling k_perturb")
        if self.eval_epochs and any(e.kind == "snapshot" for e in self.ensembles):
            raise ConfigError("eval_epochs sweeps are not defined for snapshot ensembles")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        train = self.train.to_dict()
        model = {"hidden_sizes": train.pop("hidden_sizes"), "activation": train.pop("activation")}
        for key in ("checkpoint_epochs", "dp", "seed"):
            train.pop(key)
        return {
            "dataset": self.dataset.to_dict(),
            "split": self.split.to_dict(),
            "model": model,
            "train": train,
            "ensembles": [e.to_dict() for e in self.ensembles],
            "defenses": [d.to_dict() for d in self.defenses],
            "attacks": [a.to_dict() for a in self.attacks],
            "attack_model": self.attack_model.to_dict(),
            "eval_epochs": list(self.eval_epochs),
            "metrics": list(self.metrics),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "n_jobs": self.n_jobs,
        }


def _defense_train_config(train, defense):
    p = defense.params
    if defense.name == "dp":
        dp = DPConfig(p["clip_norm"], p["noise_multiplier"], p["delta"])
        dp.validate()
        return train.replace(dp=dp).validate()
    if defense.name == "l1":
        return train.replace(l1_weight=p["weight"]).validate()
    if defense.name == "l2":
        return train.replace(l2_weight=p["weight"]).validate()
    if defense.name == "mmd_mixup":
        return train.replace(mixup_alpha=p["mixup_alpha"]).validate()
    return train


def _mmd_config(defense):
    p = defense.params
    return MMDConfig(p["bandwidth"], p["weight"], p["reference_batch_size"])


# -- data preparation ---------------------------------------------------------------


@dataclass
class PreparedData:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    feature_range: np.ndarray
    plan: SplitPlan
    reference: np.ndarray
    eval_indices: np.ndarray
    eval_member: np.ndarray


def prepare_data(config):
    """Load or generate the dataset, split it and pick the balanced eval set."""
    spec = config.dataset
    split_seed = derive_seed(config.seed, "split")
    if spec.generator is not None:
        g = spec.generator
        dataset, default_plan = generate_gaussian_mixture(
            int(g["n_classes"]), int(g["n_features"]), int(g["per_class_train"]),
            int(g["per_class_test"]), float(g["class_separation"]),
            seed=derive_seed(config.seed, "data"),
        )
        train_rows = np.concatenate([default_plan.victim_train, default_plan.shadow_pool])
        plan = make_split(dataset, config.split.fractions, split_seed,
                          train_indices=np.sort(train_rows), test_indices=default_plan.test,
                          mode=config.split.mode, known_fraction=config.split.known_fraction)
    else:
        dataset = load_csv(spec.csv_path, spec.label_column)
        plan = make_split(dataset, config.split.fractions, split_seed,
                          test_fraction=spec.test_fraction, mode=config.split.mode,
                          known_fraction=config.split.known_fraction)

    reference = np.array([], dtype=np.int64)
    if config.split.reference_fraction > 0:
        # Defender-held rows for MMD; drawn from the test portion the
        # attacker does not know about and excluded from evaluation.
        rng = np.random.default_rng(derive_seed(config.seed, "reference"))
        candidates = np.setdiff1d(plan.test, plan.known_nonmembers)
        size = int(round(config.split.reference_fraction * candidates.size))
        if size == 0:
            raise ConfigError("split.reference_fraction leaves an empty reference split")
        reference = np.sort(rng.choice(candidates, size, replace=False))
        plan = dataclasses.replace(plan, test=np.setdiff1d(plan.test, reference))

    eval_idx, eval_member = balanced_eval_indices(plan, derive_seed(config.seed, "eval"),
                                                  config.split.max_eval_per_group)
    if eval_idx.size == 0:
        raise ConfigError("the split leaves no members or no nonmembers to evaluate")
    return PreparedData(dataset.features, dataset.labels, dataset.n_classes,
                        dataset.feature_range, plan, reference, eval_idx, eval_member)


# -- run ----------------------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    version: str
    seeds: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    failed_cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])


def write_predictions(predictions, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PREDICTION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(predictions.to_rows())


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _slug(*parts):
    text = "_".join(str(p) for p in parts)
    return "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in text)


class _Runner:
    """Per-run caches of trained victims, shadows and attack models."""

    def __init__(self, config, data, manifest, out_dir, model_dir=None):
        self.config = config
        self.data = data
        self.manifest = manifest
        self.out_dir = out_dir
        self.model_dir = model_dir
        self._victims = {}
        self._shadows = {}
        self._attack_models = {}

    def _timed(self, key, fn):
        start = time.perf_counter()
        result = fn()
        self.manifest.wall_times[key] = round(time.perf_counter() - start, 3)
        return result

    def _trainer(self, defense):
        if defense.name == "mmd_mixup":
            return MMDMixupTrainer(_mmd_config(defense), self.data.reference)
        return None

    @staticmethod
    def _training_label(defense):
        # MemGuard only masks published outputs; the models underneath are
        # the undefended ones, so they share cache entries and seeds.
        return "none" if defense.name in ("none", "memguard") else defense.label

    def _family_n(self, spec, n):
        # Partitioning parts depend on n; everyone else reuses a prefix.
        return n if spec.kind == "partitioning" else max(spec.n_models)

    def _train_config(self, defense):
        train = _defense_train_config(self.config.train, defense)
        checkpoints = tuple(e for e in self.config.eval_epochs if e != train.epochs)
        return train.replace(checkpoint_epochs=checkpoints)

    def victim(self, spec, n, defense):
        size = self._family_n(spec, n)
        key = (spec.kind, spec.cycle_len, self._training_label(defense), size)
        if key not in self._victims:
            seed = derive_seed(self.config.seed, "victim", *key)
            self.manifest.seeds[_slug("victim", *key)] = seed
            saved = None
            if self.model_dir is not None and not self.config.eval_epochs:
                saved = os.path.join(self.model_dir, _slug("victim", *key) + ".json")
            if saved is not None and os.path.isfile(saved):
                self._victims[key] = load_ensemble(saved)
            else:
                d = self.data
                self._victims[key] = self._timed(_slug("victim", *key), lambda: build_ensemble(
                    spec.kind, d.X, d.y, d.plan.victim_train, size, self._train_config(defense),
                    seed, d.n_classes, self.config.n_jobs, spec.cycle_len, self._trainer(defense),
                ))
        return self._victims[key].prefix(n)

    def save_victim(self, spec, n, defense, directory):
        self.victim(spec, n, defense)
        key = (spec.kind, spec.cycle_len, self._training_label(defense), self._family_n(spec, n))
        return save_ensemble(self._victims[key], directory, _slug("victim", *key))

    def shadows(self, spec, n, defense, role):
        """Mirrored shadow targets; ``role`` is "attack" or "calibration"."""
        size = self._family_n(spec, n)
        key = (role, spec.kind, spec.cycle_len, self._training_label(defense), size)
        if key not in self._shadows:
            seed = derive_seed(self.config.seed, "shadows", *key)
            self.manifest.seeds[_slug("shadows", *key)] = seed
            am = self.config.attack_model
            count = am.n_shadows if role == "attack" else am.n_calibration
            d = self.data
            self._shadows[key] = self._timed(_slug("shadows", *key), lambda: train_shadows(
                d.X, d.y, d.plan.attacker_pool, count, self._train_config(defense), seed,
                spec.kind, size, d.n_classes, self.config.n_jobs, spec.cycle_len,
                self._trainer(defense),
            ))
        return self._shadows[key]

    def post_fusion(self, defense, *key):
        if defense.name != "memguard":
            return None
        seed = derive_seed(self.config.seed, "memguard", defense.label, *key)
        return MemGuardRandom(defense.params["noise_magnitude"], seed)

    def attack_model(self, spec, n, defense, fusion, epoch):
        key = (spec.kind, spec.cycle_len, n, defense.label, fusion, epoch)
        if key not in self._attack_models:
            shadow_set = self.shadows(spec, n, defense, "attack")
            views = shadow_set.view(n, None if epoch == self.config.train.epochs else epoch)
            post = self.post_fusion(defense, "shadow", *key)
            features, membership = build_attack_dataset(views, self.data.X, self.data.y,
                                                         fusion, post)
            # The seed omits the fusion rule so identical shadow outputs (e.g.
            # n = 1) always yield the identical attack model.
            seed = derive_seed(self.config.seed, "attack-model", *key[:4], epoch)
            self.manifest.seeds[_slug("attack-model", *key)] = seed
            est = self.config.attack_model.estimator(seed)
            self._attack_models[key] = self._timed(_slug("attack-model", *key),
                                                   lambda: est.fit(features, membership))
        return self._attack_models[key]

    def predictions(self, spec, n, fusion, defense, epoch):
        ens = self.victim(spec, n, defense)
        if epoch != self.config.train.epochs and spec.kind != "snapshot":
            ens = ens.at_epoch(epoch)
        d = self.data
        post = self.post_fusion(defense, "victim", spec.kind, n, fusion, epoch)
        preds = predict_all(ens, fusion, d.X[d.eval_indices], d.y[d.eval_indices],
                            d.eval_member, d.eval_indices, post)
        return ens, preds

    def run_attack(self, attack, spec, n, fusion, defense, epoch, ens, preds):
        d = self.data
        if attack.name == "gap":
            return gap_attack(preds)
        if attack.name == "shokri":
            return shokri_attack(preds, self.attack_model(spec, n, defense, fusion, epoch))
        if attack.name == "watson":
            model = self.attack_model(spec, n, defense, fusion, epoch)
            calibration = self.shadows(spec, n, defense, "calibration").view(
                n, None if epoch == self.config.train.epochs else epoch)
            post = self.post_fusion(defense, "calibration", spec.kind, n, fusion, epoch)
            return watson_attack(preds, d.X[d.eval_indices], model, calibration, fusion, post)
        if attack.name == "sampling":
            seed = derive_seed(self.config.seed, "sampling", spec.kind, n, fusion,
                               defense.label, epoch)
            sigmas = attack.params["sigmas"]
            return sampling_attack(ens, fusion, d.X[d.eval_indices], d.eval_member,
                                   d.feature_range, attack.params["k_perturb"], sigmas,
                                   seed, d.eval_indices)
        raise ConfigError(f"unknown attack {attack.name!r}")


def _cells(config):
    for spec in config.ensembles:
        epochs = (config.train.epochs,) if spec.kind == "snapshot" else (
            config.eval_epochs or (config.train.epochs,))
        for n in spec.n_models:
            for fusion in spec.fusions:
                for defense in config.defenses:
                    for epoch in epochs:
                        yield spec, n, fusion, defense, epoch


def _reported_epochs(config, spec, n, epoch):
    if spec.kind != "snapshot":
        return epoch
    cycle_len = spec.cycle_len or max(1, config.train.epochs // max(spec.n_models))
    return n * cycle_len


def _baseline_defense(config):
    for d in config.defenses:
        if d.name == "none":
            return d
    return NamedSpec("none", {}, "none")


def _prepare_run(config, out_dir, threads):
    if threads is not None:
        config = config.replace(n_jobs=_positive_int(threads, "threads"))
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    return config, out_dir


def train_victims(config, out_dir=None, threads=None):
    """Train every victim ensemble family and save it under ``out_dir/models``.

    A later :func:`run_experiment` with ``model_dir`` pointing there reuses
    them instead of retraining. Returns the written manifest paths.
    """
    config, out_dir = _prepare_run(config, out_dir, threads)
    model_dir = os.path.join(out_dir, "models")
    data = prepare_data(config)
    runner = _Runner(config, data, RunManifest(config.to_dict(), __version__), out_dir)
    written = []
    with threadpool_limits(1):
        for spec in config.ensembles:
            sizes = sorted({runner._family_n(spec, n) for n in spec.n_models})
            for size in sizes:
                for defense in config.defenses:
                    path = runner.save_victim(spec, size, defense, model_dir)
                    if path not in written:
                        written.append(path)
    return written


def run_experiment(config, out_dir=None, threads=None, model_dir=None):
    """Run every configured cell and write report, predictions, scores and manifest.

    Parameters
    ----------
    config : ExperimentConfig
    out_dir : str, optional
        Overrides ``config.output_dir``.
    threads : int, optional
        Overrides ``config.n_jobs`` (parallel base-model training).
    model_dir : str, optional
        Directory of victims saved by :func:`train_victims` to reuse.

    Returns
    -------
    RunManifest
    """
    config, out_dir = _prepare_run(config, out_dir, threads)
    pred_dir = os.path.join(out_dir, "predictions")
    score_dir = os.path.join(out_dir, "scores")
    for path in (out_dir, pred_dir, score_dir):
        os.makedirs(path, exist_ok=True)

    manifest = RunManifest(config.to_dict(), __version__)
    manifest.metadata = {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "distortion": "mean over the balanced eval set of L1/2 against the undefended, "
                      "average-fused ensemble of the same kind, n and epoch",
        "js_div": "base-2, 100 bins of fused max-confidence on [0, 1]",
        "tpr_threshold": "lowest threshold with FPR <= target",
        "watson_calibration": "linear: score minus mean calibration-shadow score",
    }
    manifest.seeds["master"] = config.seed
    start = time.perf_counter()
    data = prepare_data(config)
    manifest.seeds["split"] = derive_seed(config.seed, "split")
    manifest.seeds["eval"] = derive_seed(config.seed, "eval")
    manifest.metadata.update(
        split_mode=config.split.mode,
        n_eval_members=int(data.eval_member.sum()),
        n_eval_nonmembers=int((~data.eval_member).sum()),
        n_reference=int(data.reference.size),
    )
    split_path = os.path.join(out_dir, "split.json")
    data.plan.save(split_path)

    runner = _Runner(config, data, manifest, out_dir, model_dir)
    baseline_defense = _baseline_defense(config)
    rows = []
    with threadpool_limits(1):
        for spec, n, fusion, defense, epoch in _cells(config):
            cell = _slug(spec.kind, f"n{n}", fusion, defense.label, f"e{epoch}")
            try:
                ens, preds = runner.predictions(spec, n, fusion, defense, epoch)
                if fusion == "average" and defense.name == "none":
                    baseline = preds
                else:
                    baseline = runner.predictions(spec, n, "average", baseline_defense, epoch)[1]
                write_predictions(preds, os.path.join(pred_dir, f"{cell}.csv"))
                train_acc = float(np.mean(preds.correct[preds.is_member]))
                test_acc = float(np.mean(preds.correct[~preds.is_member]))
                conf = preds.fused.max(axis=1)
                common = {
                    "dataset": config.dataset.name,
                    "ensemble_kind": spec.kind,
                    "n_models": n,
                    "fusion": fusion,
                    "defense": defense.label,
                    "epochs": _reported_epochs(config, spec, n, epoch),
                    "split_mode": config.split.mode,
                    "seed": config.seed,
                }
                if "accuracy" in config.metrics:
                    common.update(train_acc=train_acc, test_acc=test_acc)
                if "distortion" in config.metrics:
                    common["distortion"] = confidence_distortion(baseline, preds)
                if "js_div" in config.metrics:
                    common["js_div"] = js_divergence(conf[preds.is_member], conf[~preds.is_member])
                cell_rows = []
                for attack in config.attacks:
                    scores = runner.run_attack(attack, spec, n, fusion, defense, epoch, ens, preds)
                    scores.target = cell
                    scores.attack = attack.label
                    scores.to_csv(os.path.join(score_dir, f"{cell}_{_slug(attack.label)}.csv"))
                    row = dict(common, attack=attack.label)
                    if "auc" in config.metrics:
                        row["auc"] = roc_auc(scores)
                    if "tpr" in config.metrics:
                        row["tpr_fpr_0_001"] = tpr_at_fpr(scores, REPORT_FPRS[0])
                        row["tpr_fpr_0_1"] = tpr_at_fpr(scores, REPORT_FPRS[1])
                    cell_rows.append(row)
                rows.extend(cell_rows)
                log.info("cell %s done", cell)
            except (EnsemblePrivacyError, ValueError, ArithmeticError, RuntimeError) as exc:
                log.warning("cell %s failed: %s", cell, exc)
                manifest.failed_cells.append({
                    "cell": cell,
                    "error": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(limit=3),
                })

    report_path = os.path.join(out_dir, "report.csv")
    write_report(rows, report_path)
    manifest.wall_times["total"] = round(time.perf_counter() - start, 3)
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            if name == "manifest.json":
                continue
            manifest.files[os.path.relpath(path, out_dir)] = _sha256(path)
    manifest.files = dict(sorted(manifest.files.items()))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def read_report(path):
    """Report rows as dicts of strings (the CSV's own representation)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_scores(path):
    return AttackScoreSet.from_csv(path)


__all__ = [
    "ATTACKS", "DEFENSES", "METRICS", "REPORT_COLUMNS", "ExperimentConfig", "RunManifest",
    "prepare_data", "run_experiment", "train_victims", "read_report", "write_report", "write_predictions",
]
