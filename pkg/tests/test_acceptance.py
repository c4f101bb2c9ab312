"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
lists every criterion. The benchmark (Gaussian mixture, K=10, d=20, 50
training and 200 test samples per class, one hidden layer of 128 units, 200
epochs) is trained once per session for seeds 0, 1 and 2.
"""

import csv
import math
import os
import shutil
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from ensemble_privacy.attacks import AttackScoreSet
from ensemble_privacy.defenses import memguard_random
from ensemble_privacy.fusion import fuse_average, fuse_first_agreed, fuse_max_agreed
from ensemble_privacy.harness import ExperimentConfig, read_report, run_experiment
from ensemble_privacy.metrics import js_divergence, roc_auc, tpr_at_fpr
from ensemble_privacy.nn import MLPModel, dp_clip_and_noise, loss_and_grad, per_example_grads
from ensemble_privacy.training import DPConfig

from .conftest import BENCHMARK_SEEDS, CONFIG_DIR, load_config
from .oracles import brute_auc, finite_difference_check, sweep_tpr

N_VALUES = (1, 2, 5, 10)

pytestmark = pytest.mark.slow


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def predictions(run, n, fusion="average", defense="none"):
    return read_csv(run.path("predictions", f"deep_n{n}_{fusion}_{defense}_e200.csv"))


# 1 -------------------------------------------------------------------------------


def test_c01_gradients_match_finite_differences(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(20):
        depth = int(rng.integers(0, 4))
        sizes = (int(rng.integers(2, 6)), *rng.integers(2, 7, depth).tolist(), int(rng.integers(2, 6)))
        model = MLPModel.initialize(sizes, ("relu", "tanh")[k % 2], rng)
        for b in model.biases:
            b[:] = 0.3 * rng.standard_normal(b.shape)
        X = rng.standard_normal((5, sizes[0]))
        y = rng.dirichlet(np.ones(sizes[-1]), 5) if k % 3 == 0 else rng.integers(0, sizes[-1], 5)
        l1, l2 = 1e-3 * (k % 2), 1e-2

        def loss(m):
            return loss_and_grad(m, X, y, l1, l2)[0]

        worst = max(worst, finite_difference_check(model, loss, loss_and_grad(model, X, y, l1, l2)[1]))
        # per-example gradients: check the first example on its own loss
        (g0, *_) = per_example_grads(model, X, y)
        worst = max(worst, finite_difference_check(model, lambda m: loss_and_grad(m, X[:1], y[:1])[0], g0))
    elapsed = time.perf_counter() - start
    passed = criterion(1, "gradient correctness", worst < 1e-4 and elapsed < 30,
                       f"max rel err {worst:.2e} over 20 networks in {elapsed:.1f}s")
    assert passed


# 2 -------------------------------------------------------------------------------


def test_c02_fusion_argmax_equivalence(criterion):
    rng = np.random.default_rng(7)
    mismatches = samples = fallbacks = 0
    for _ in range(10_000):
        n, k = int(rng.integers(1, 11)), int(rng.integers(2, 11))
        conf = rng.dirichlet(np.full(k, rng.choice([0.2, 1.0, 5.0])), size=(n, 4))
        label = np.argmax(fuse_average(conf), axis=1)
        first, fb = fuse_first_agreed(conf, return_fallback=True)
        mismatches += int(np.sum(np.argmax(first, 1) != label))
        mismatches += int(np.sum(np.argmax(fuse_max_agreed(conf), 1) != label))
        samples += 4
        fallbacks += fb
    passed = criterion(2, "fusion argmax equivalence", mismatches == 0,
                       f"{mismatches} mismatches on {samples} samples of 10000 ensembles "
                       f"({fallbacks} without an agreeing model)")
    assert passed


# 3 -------------------------------------------------------------------------------


def test_c03_tradeoff_trend(criterion, benchmark_runs):
    acc = {n: np.mean([float(r.row(n)["test_acc"]) for r in benchmark_runs]) for n in N_VALUES}
    auc = {n: np.mean([float(r.row(n)["auc"]) for r in benchmark_runs]) for n in N_VALUES}
    monotone = all(acc[b] >= acc[a] - 0.01 for a, b in zip(N_VALUES, N_VALUES[1:]))
    gain = auc[10] - auc[1]
    runtime = sum(r.seconds for r in benchmark_runs)
    detail = ("mean test acc " + ", ".join(f"n={n}:{acc[n]:.4f}" for n in N_VALUES)
              + f"; mean Shokri AUC n=1 {auc[1]:.4f} -> n=10 {auc[10]:.4f} (gain {gain:+.4f})"
              + f"; runtime {runtime:.0f}s")
    passed = criterion(3, "trade-off trend", monotone and gain >= 0.02 and runtime < 600, detail)
    assert passed


# 4 -------------------------------------------------------------------------------


def test_c04_max_agreed_defense(criterion, benchmark_runs):
    parts, ok = [], True
    for run in benchmark_runs:
        avg, agreed = run.row(10, "average"), run.row(10, "max_agreed")
        labels_avg = [r["fused_label"] for r in predictions(run, 10, "average")]
        labels_agr = [r["fused_label"] for r in predictions(run, 10, "max_agreed")]
        same_acc = avg["test_acc"] == agreed["test_acc"] and labels_avg == labels_agr
        drop = float(avg["auc"]) - float(agreed["auc"])
        ok &= same_acc and drop >= 0.01
        parts.append(f"seed {run.seed}: AUC {avg['auc'][:6]} -> {agreed['auc'][:6]}, "
                     f"accuracy identical={same_acc}")
    passed = criterion(4, "max-agreed fusion lowers AUC at equal accuracy", ok, "; ".join(parts))
    assert passed


# 5 -------------------------------------------------------------------------------


def test_c05_gap_identity(criterion, benchmark_runs):
    checked = failures = 0
    for run in benchmark_runs:
        for name in os.listdir(run.path("scores")):
            if not name.endswith("_gap.csv"):
                continue
            rows = read_csv(run.path("scores", name))
            preds = {r["sample_id"]: r for r in read_csv(run.path("predictions", name[:-8] + ".csv"))}
            members = [r for r in rows if r["is_member"] == "1"]
            others = [r for r in rows if r["is_member"] == "0"]
            tp = sum(1 for r in members if float(r["score"]) == 1.0)
            tn = sum(1 for r in others if float(r["score"]) == 0.0)
            balanced = (Fraction(tp, len(members)) + Fraction(tn, len(others))) / 2
            correct = [preds[r["sample_id"]]["fused_label"] == preds[r["sample_id"]]["true_label"]
                       for r in rows]
            train_acc = Fraction(sum(c for c, r in zip(correct, rows) if r["is_member"] == "1"),
                                 len(members))
            test_acc = Fraction(sum(c for c, r in zip(correct, rows) if r["is_member"] == "0"),
                                len(others))
            checked += 1
            failures += balanced != Fraction(1, 2) + (train_acc - test_acc) / 2
    passed = criterion(5, "gap-attack identity", checked > 0 and failures == 0,
                       f"{checked} configurations, {failures} violations (exact rational arithmetic)")
    assert passed


# 6 -------------------------------------------------------------------------------


def test_c06_agreement_gap(criterion, benchmark_runs):
    parts, ok = [], True
    for run in benchmark_runs:
        rows = predictions(run, 10)
        cm = np.mean([int(r["agreement_c"]) for r in rows if r["is_member"] == "1"])
        cn = np.mean([int(r["agreement_c"]) for r in rows if r["is_member"] == "0"])
        ok &= cm >= cn
        parts.append(f"seed {run.seed}: members {cm:.3f} vs nonmembers {cn:.3f}")
    passed = criterion(6, "members agree more often at n=10", ok, "; ".join(parts))
    assert passed


# 7 -------------------------------------------------------------------------------


def test_c07_distortion_baseline(criterion, benchmark_runs):
    values = [run.row(n, attack=attack)["distortion"] for run in benchmark_runs for n in N_VALUES
              for attack in ("gap", "shokri")]
    passed = criterion(7, "undefended distortion is zero", all(v == "0.0" for v in values),
                       f"{len(values)} rows, distinct values {sorted(set(values))}")
    assert passed


# 8 -------------------------------------------------------------------------------


def test_c08_metric_oracles(criterion):
    rng = np.random.default_rng(11)
    auc_bad = tpr_bad = 0
    for _ in range(100):
        size = int(rng.integers(2, 201))
        scores = np.round(rng.random(size), int(rng.integers(1, 4)))
        member = rng.random(size) < rng.uniform(0.2, 0.8)
        member[0], member[1] = True, False
        auc_bad += roc_auc(scores, member) != brute_auc(scores.tolist(), member.tolist())
        for f in (0.0, 0.001, 0.1, 0.5):
            tpr_bad += tpr_at_fpr(scores, f, member) != sweep_tpr(scores.tolist(), member.tolist(), f)
    x = rng.random(300)
    js_same = js_divergence(x, x.copy())
    js_apart = js_divergence(np.ones(50), np.zeros(70))
    ok = auc_bad == 0 and tpr_bad == 0 and js_same == 0.0 and js_apart == 1.0
    passed = criterion(8, "metric oracles", ok,
                       f"AUC mismatches {auc_bad}/100, TPR mismatches {tpr_bad}/400, "
                       f"JS identical {js_same}, JS disjoint {js_apart}")
    assert passed


# 9 -------------------------------------------------------------------------------


def test_c09_memguard_preserves_labels(criterion, tmp_path):
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.full(10, 0.5), size=10_000)
    random_flips = int(np.sum(np.argmax(memguard_random(P, 0.1, rng), 1) != np.argmax(P, 1)))

    payload = load_config("benchmark.json").to_dict()
    payload["ensembles"] = [{"kind": "deep", "n_models": [10], "fusions": ["average"]}]
    payload["defenses"] = ["none", "memguard"]
    payload["attacks"] = ["gap"]
    run_experiment(ExperimentConfig.from_dict(payload), str(tmp_path))
    plain = read_csv(tmp_path / "predictions" / "deep_n10_average_none_e200.csv")
    masked = read_csv(tmp_path / "predictions" / "deep_n10_average_memguard_e200.csv")
    eval_flips = sum(a["fused_label"] != b["fused_label"] for a, b in zip(plain, masked))
    rows = {r["defense"]: r for r in read_report(tmp_path / "report.csv")}
    same_acc = rows["none"]["test_acc"] == rows["memguard"]["test_acc"] and \
        rows["none"]["train_acc"] == rows["memguard"]["train_acc"]
    ok = random_flips == 0 and eval_flips == 0 and same_acc and len(plain) == len(masked) > 0
    passed = criterion(9, "MemGuard-random keeps every label", ok,
                       f"{random_flips} flips on 10000 random inputs, {eval_flips} flips on "
                       f"{len(plain)} benchmark eval samples, accuracy identical={same_acc}, "
                       f"distortion {float(rows['memguard']['distortion']):.4f}")
    assert passed


# 10 ------------------------------------------------------------------------------


def test_c10_dp_sgd(criterion, tmp_path):
    rng = np.random.default_rng(5)
    model = MLPModel.initialize((20, 128, 10), "relu", rng)
    X, y = 3 * rng.standard_normal((64, 20)), rng.integers(0, 10, 64)
    worst = 0.0
    for clip in (0.1, 1.0, 4.0):
        for g in per_example_grads(model, X, y):
            worst = max(worst, dp_clip_and_noise([g], DPConfig(clip, 0.0), rng).norm() - clip)

    parts, trend = [], True
    for seed in BENCHMARK_SEEDS:
        out = tmp_path / f"dp{seed}"
        run_experiment(load_config("dp.json", seed=seed), str(out))
        rows = {r["defense"]: r for r in read_report(out / "report.csv")}
        base = next(v for k, v in rows.items() if k == "none")
        dp = next(v for k, v in rows.items() if k.startswith("dp"))
        lower_auc = float(dp["auc"]) <= float(base["auc"])
        lower_acc = float(dp["test_acc"]) < float(base["test_acc"])
        trend &= lower_auc and lower_acc
        parts.append(f"seed {seed}: AUC {float(base['auc']):.3f}->{float(dp['auc']):.3f}, "
                     f"test acc {float(base['test_acc']):.3f}->{float(dp['test_acc']):.3f}")
    ok = worst <= 1e-9 and trend
    passed = criterion(10, "DP-SGD clipping and privacy-for-accuracy trend", ok,
                       f"max clipped norm excess {worst:.1e}; " + "; ".join(parts))
    assert passed


# 11 ------------------------------------------------------------------------------


def test_c11_determinism_across_threads(criterion, tmp_path):
    exe = shutil.which("ensemble-privacy")
    cmd = [exe] if exe else [sys.executable, "-m", "ensemble_privacy.cli"]
    config = os.path.join(CONFIG_DIR, "determinism.json")
    reports = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        proc = subprocess.run(cmd + ["run", "--config", config, "--out-dir", str(out),
                                     "--threads", str(threads)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        reports.append((out / "report.csv").read_bytes())
    rows = reports[0].count(b"\n") - 1
    passed = criterion(11, "byte-identical reports across thread counts", reports[0] == reports[1],
                       f"{rows} report rows, threads 1 vs 8")
    assert passed


def test_score_files_parse(benchmark_runs):
    """Every persisted score file loads back with finite scores."""
    run = benchmark_runs[0]
    for name in os.listdir(run.path("scores")):
        scores = AttackScoreSet.from_csv(run.path("scores", name))
        assert len(scores.scores) > 0 and math.isfinite(float(scores.scores.sum()))
