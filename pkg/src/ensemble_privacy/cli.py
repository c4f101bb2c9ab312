"""Command-line entry point: ``ensemble-privacy <command> [options]``.

Exit codes: 0 on success, 1 on configuration or usage errors (including bad
command-line arguments), 2 on runtime failures (including failed cells).
"""

import argparse
import json
import logging
import os
import sys

from . import __version__
from .data import LabeledDataset, write_csv
from .exceptions import (
    ConfigError,
    EnsemblePrivacyError,
    ParseError,
    SchemaError,
    UsageError,
)
from .harness import ExperimentConfig, prepare_data, read_report, run_experiment, train_victims
from .plotting import render_figures

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("ensemble_privacy")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; usage errors here are exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _threads(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return value


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default,
                        help="JSON experiment config")
    parser.add_argument("--seed", metavar="U64", type=_seed, default=default,
                        help="master seed (overrides the config)")
    parser.add_argument("--out-dir", metavar="PATH", default=default,
                        help="output directory (overrides the config)")
    parser.add_argument("--threads", metavar="N", type=_threads, default=default,
                        help="parallel training jobs; results do not depend on it")
    parser.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="log progress to stderr")


def build_parser():
    parser = _Parser(prog="ensemble-privacy",
                     description="Membership-inference experiments on deep ensembles.")
    parser.add_argument("--version", action="version", version=__version__)
    _global_options(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen-data", parents=[common],
                         help="write the configured (or flag-specified) dataset and split")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--features", type=int, default=20)
    gen.add_argument("--per-class-train", type=int, default=50)
    gen.add_argument("--per-class-test", type=int, default=200)
    gen.add_argument("--separation", type=float, default=2.0)

    sub.add_parser("train", parents=[common],
                   help="train and save every victim ensemble of the config")
    sub.add_parser("attack", parents=[common],
                   help="attack the configured cells, reusing saved victims when present")
    report = sub.add_parser("report", parents=[common],
                            help="print a report CSV as an aligned table")
    report.add_argument("--report", metavar="PATH",
                        help="report CSV (default: OUT_DIR/report.csv)")
    plot = sub.add_parser("plot", parents=[common], help="render SVG figures from CSVs")
    plot.add_argument("--report", metavar="PATH",
                      help="report CSV (default: OUT_DIR/report.csv)")
    sub.add_parser("run", parents=[common], help="end to end: train, attack, report, plot")
    return parser


def _load_config(args, required=True):
    if not args.config:
        if required:
            raise ConfigError(f"'{args.command}' needs --config PATH")
        return None
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.out_dir is not None:
        config = config.replace(output_dir=args.out_dir)
    return config


def _out_dir(args, config):
    if args.out_dir:
        return args.out_dir
    if config is not None:
        return config.output_dir
    return "out"


def _cmd_gen_data(args):
    config = _load_config(args, required=False)
    if config is None:
        payload = {
            "dataset": {"generator": {
                "n_classes": args.classes, "n_features": args.features,
                "per_class_train": args.per_class_train,
                "per_class_test": args.per_class_test,
                "class_separation": args.separation,
            }},
            "ensembles": [{"kind": "deep", "n_models": [1]}],
            "attacks": ["gap"],
            "seed": 0 if args.seed is None else args.seed,
        }
        config = ExperimentConfig.from_dict(payload)
    out_dir = _out_dir(args, config)
    os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(config)
    write_csv(LabeledDataset(data.X, data.y), os.path.join(out_dir, "data.csv"))
    data.plan.save(os.path.join(out_dir, "split.json"))
    print(os.path.join(out_dir, "data.csv"))
    return EXIT_OK


def _cmd_train(args):
    config = _load_config(args)
    for path in train_victims(config, _out_dir(args, config), args.threads):
        print(path)
    return EXIT_OK


def _finish_run(manifest, out_dir):
    print(os.path.join(out_dir, "report.csv"))
    if manifest.failed_cells:
        for cell in manifest.failed_cells:
            print(f"failed cell {cell['cell']}: {cell['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_attack(args):
    config = _load_config(args)
    out_dir = _out_dir(args, config)
    manifest = run_experiment(config, out_dir, args.threads,
                              model_dir=os.path.join(out_dir, "models"))
    return _finish_run(manifest, out_dir)


def _report_path(args, config):
    return args.report or os.path.join(_out_dir(args, config), "report.csv")


def _cmd_report(args):
    config = _load_config(args, required=False)
    path = _report_path(args, config)
    if not os.path.isfile(path):
        raise ConfigError(f"report {path!r} does not exist")
    rows = read_report(path)
    columns = ("ensemble_kind", "n_models", "fusion", "defense", "epochs", "attack",
               "train_acc", "test_acc", "auc", "tpr_fpr_0_001", "tpr_fpr_0_1")
    table = [columns] + [tuple(_short(r.get(c, "")) for c in columns) for r in rows]
    widths = [max(len(row[k]) for row in table) for k in range(len(columns))]
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return EXIT_OK


def _short(value):
    try:
        number = float(value)
    except ValueError:
        return value
    if "." in value or "e" in value:
        return f"{number:.4f}"
    return value


def _cmd_plot(args):
    config = _load_config(args, required=False)
    out_dir = _out_dir(args, config)
    path = _report_path(args, config)
    if not os.path.isfile(path):
        raise ConfigError(f"report {path!r} does not exist")
    for written in render_figures(path, os.path.join(out_dir, "figures"),
                                  os.path.join(os.path.dirname(path), "predictions")):
        print(written)
    return EXIT_OK


def _cmd_run(args):
    config = _load_config(args)
    out_dir = _out_dir(args, config)
    manifest = run_experiment(config, out_dir, args.threads)
    render_figures(os.path.join(out_dir, "report.csv"), os.path.join(out_dir, "figures"),
                   os.path.join(out_dir, "predictions"))
    return _finish_run(manifest, out_dir)


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "report": _cmd_report,
    "plot": _cmd_plot,
    "run": _cmd_run,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ParseError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnsemblePrivacyError, ArithmeticError, RuntimeError, OSError,
            json.JSONDecodeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
