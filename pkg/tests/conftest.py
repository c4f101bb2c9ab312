"""Shared fixtures: the overfit benchmark runs and the acceptance ledger."""

import os
import time

import pytest

from ensemble_privacy.harness import ExperimentConfig, read_report, run_experiment

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
BENCHMARK_SEEDS = (0, 1, 2)

_RESULTS = {}


def load_config(name, **changes):
    config = ExperimentConfig.load(os.path.join(CONFIG_DIR, name))
    return config.replace(**changes) if changes else config


class BenchmarkRun:
    def __init__(self, seed, out_dir, manifest, seconds):
        self.seed = seed
        self.out_dir = out_dir
        self.manifest = manifest
        self.seconds = seconds
        self.rows = read_report(os.path.join(out_dir, "report.csv"))

    def row(self, n, fusion="average", attack="shokri", defense="none"):
        (match,) = [r for r in self.rows if int(r["n_models"]) == n and r["fusion"] == fusion
                    and r["attack"] == attack and r["defense"] == defense]
        return match

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)


@pytest.fixture(scope="session")
def benchmark_runs(tmp_path_factory):
    """configs/benchmark.json for every benchmark seed (trained once per session)."""
    root = tmp_path_factory.mktemp("benchmark")
    runs = []
    for seed in BENCHMARK_SEEDS:
        out = str(root / f"seed{seed}")
        start = time.perf_counter()
        manifest = run_experiment(load_config("benchmark.json", seed=seed), out)
        runs.append(BenchmarkRun(seed, out, manifest, time.perf_counter() - start))
    return runs


@pytest.fixture
def criterion():
    """``criterion(number, title, passed, detail)`` records a pass/fail line."""

    def record(number, title, passed, detail=""):
        _RESULTS[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        terminalreporter.write_line(
            f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
