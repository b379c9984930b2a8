"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
arguments, 3 dataset missing, unreadable or malformed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import cnn
from .comm import model_size_rows, overhead_comparison_rows
from .data import Dataset, LibsvmParseError, TaskKind, load_libsvm, train_test_split
from .model_io import deserialize_aggregate, serialize_aggregate, serialize_ensemble
from .protocol import (FedConfig, GlobalModel, evaluate_ensemble, evaluate_global,
                       run_training, train_centralized)

log = logging.getLogger("fedgbdt")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

# config key -> FedConfig field (None: handled by the CLI itself)
CONFIG_KEYS = {
    "dataset": None, "test_dataset": None, "task": None, "repeats": None, "dimension": None,
    "num_clients": "num_clients", "K": "num_clients",
    "rounds": "rounds", "R": "rounds",
    "local_epochs": "local_epochs", "E": "local_epochs",
    "batch_size": "batch_size", "B": "batch_size",
    "alpha": "local_lr", "local_lr": "local_lr",
    "beta1": "beta1", "beta2": "beta2",
    "channels": "channels", "C": "channels",
    "total_trees": "total_trees",
    "max_depth": "max_depth", "L": "max_depth",
    "eta": "eta", "lambda": "reg_lambda", "gamma": "gamma",
    "min_child_weight": "min_child_weight",
    "seed": "seed", "test_fraction": "test_fraction",
    "head_variant": "head_variant", "scale_inputs_by_eta": "scale_inputs_by_eta",
}
_FIELD_TYPES = {f.name: f.type for f in fields(FedConfig)}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _convert(key: str, field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key {key!r}") from None
    return raw


def parse_config(text: str) -> tuple[dict, FedConfig]:
    """Parse ``key = value`` lines; returns (cli settings, FedConfig)."""
    settings: dict = {"repeats": 1}
    overrides: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        target = CONFIG_KEYS[key]
        if target is None:
            settings[key] = value
        else:
            overrides[target] = _convert(key, target, value)
    for required in ("dataset", "task"):
        if required not in settings:
            raise ConfigError(f"missing required config key {required!r}")
    try:
        settings["task"] = TaskKind.parse(settings["task"])
    except ValueError:
        raise ConfigError(f"invalid value {settings['task']!r} for key 'task'") from None
    for key in ("repeats", "dimension"):
        if key in settings:
            try:
                settings[key] = int(settings[key])
            except ValueError:
                raise ConfigError(f"invalid value {settings[key]!r} for key {key!r}") from None
    try:
        config = FedConfig(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return settings, config


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_datasets(settings: dict, config_dir: Path, test_fraction: float,
                  seed: int) -> tuple[Dataset, Dataset]:
    task, dim = settings["task"], settings.get("dimension")
    try:
        data = load_libsvm(_resolve(config_dir, settings["dataset"]), task, dim)
        if "test_dataset" in settings:
            test = load_libsvm(_resolve(config_dir, settings["test_dataset"]), task, dim)
            d = max(data.dimension, test.dimension)
            return data.with_dimension(d), test.with_dimension(d)
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from None
    except LibsvmParseError as exc:
        raise DataError(f"malformed dataset: {exc}") from None
    return train_test_split(data, test_fraction, seed)


def _read_config(args) -> tuple[dict, FedConfig, Path]:
    path = Path(args.config)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    settings, config = parse_config(text)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.repeats is not None:
        settings["repeats"] = args.repeats
    if settings["repeats"] < 1:
        raise ConfigError("repeats must be >= 1")
    return settings, config, path.parent


def write_round_log(path: Path, logs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "bytes_up", "bytes_down", "metric"])
        for entry in logs:
            w.writerow([entry.round, entry.bytes_up, entry.bytes_down, repr(entry.global_metric)])


def save_global_model(directory: Path, model: GlobalModel) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "aggregate.json").write_bytes(serialize_aggregate(model.aggregate))
    (directory / "cnn.ckpt").write_bytes(cnn.encode_checkpoint(model.cnn, model.cnn_config))
    manifest = {"aggregate": "aggregate.json", "cnn": "cnn.ckpt",
                "scale_inputs_by_eta": model.scale_inputs_by_eta}
    (directory / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_global_model(directory: Path) -> GlobalModel:
    manifest = json.loads((directory / "model.json").read_text())
    agg = deserialize_aggregate((directory / manifest["aggregate"]).read_bytes())
    params, cfg = cnn.decode_checkpoint((directory / manifest["cnn"]).read_bytes())
    return GlobalModel(agg, params, cfg, bool(manifest.get("scale_inputs_by_eta", False)))


def _write_summary(out_dir: Path, rows, metric_name: str) -> float:
    mean = statistics.fmean(m for _, _, m in rows)
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "seed", metric_name])
        for run, seed, metric in rows:
            w.writerow([run, seed, repr(metric)])
        w.writerow(["mean", "", repr(mean)])
    return mean


def _metric_name(task: TaskKind) -> str:
    return "accuracy" if task is TaskKind.CLASSIFICATION else "mse"


def cmd_run(args) -> int:
    settings, config, base = _read_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in range(settings["repeats"]):
        cfg = replace(config, seed=config.seed + run)
        train, test = load_datasets(settings, base, cfg.test_fraction, cfg.seed)
        log.info("run %d: seed=%d train=%d test=%d", run, cfg.seed, len(train), len(test))
        model, logs = run_training(cfg, train, test)
        run_dir = out_dir / f"run_{run}"
        save_global_model(run_dir, model)
        write_round_log(run_dir / "rounds.csv", logs)
        rows.append((run, cfg.seed, logs[-1].global_metric))
    mean = _write_summary(out_dir, rows, _metric_name(settings["task"]))
    print(f"{_metric_name(settings['task'])},{mean!r}")
    return EXIT_OK


def cmd_centralized(args) -> int:
    settings, config, base = _read_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in range(settings["repeats"]):
        cfg = replace(config, seed=config.seed + run)
        train, test = load_datasets(settings, base, cfg.test_fraction, cfg.seed)
        ensemble = train_centralized(cfg, train)
        run_dir = out_dir / f"run_{run}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "ensemble.json").write_bytes(serialize_ensemble(ensemble))
        rows.append((run, cfg.seed, evaluate_ensemble(ensemble, test)))
    mean = _write_summary(out_dir, rows, _metric_name(settings["task"]))
    print(f"{_metric_name(settings['task'])},{mean!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        model = load_global_model(Path(args.model_dir))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load model from {args.model_dir}: {exc}") from None
    try:
        data = load_libsvm(args.data, model.aggregate.task)
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from None
    except LibsvmParseError as exc:
        raise DataError(f"malformed dataset: {exc}") from None
    print(f"{_metric_name(data.task)},{evaluate_global(model, data)!r}")
    return EXIT_OK


def cmd_report_sizes(args) -> int:
    w = csv.writer(sys.stdout)
    w.writerow(["model", "total_params", "params_mb", "pass_mb"])
    for name, rep in model_size_rows(args.channels, args.total_trees, args.bytes_per_value):
        w.writerow([name, rep.total_params, f"{rep.params_mb:.2f}", f"{rep.pass_mb:.2f}"])
    return EXIT_OK


def cmd_report_comm(args) -> int:
    w = csv.writer(sys.stdout)
    w.writerow(["dataset", "ours_mb", "simfl_mb", "factor", "K", "M", "R", "sz_t_mb", "sz_nn_mb"])
    rows = overhead_comparison_rows(args.cnn_mb, args.clients, args.total_trees, args.rounds,
                                    args.tree_mb)
    for name, ours, simfl, factor in rows:
        w.writerow([name, f"{ours:.1f}", simfl, round(factor), args.clients, args.total_trees,
                    args.rounds, args.tree_mb, args.cnn_mb])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgbdt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, help_ in (("run", cmd_run, "federated experiment"),
                              ("centralized", cmd_centralized, "pooled-data GBDT baseline")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", default="out")
        p.add_argument("--seed", type=int)
        p.add_argument("--repeats", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="score a LIBSVM file with a saved global model")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True, help="LIBSVM file, or - for stdin")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report-sizes", help="parameter counts and sizes of the heads")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--total-trees", type=int, default=500)
    p.add_argument("--bytes-per-value", type=int, default=4)
    p.set_defaults(func=cmd_report_sizes)

    p = sub.add_parser("report-comm", help="closed-form communication overhead table")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--total-trees", type=int, default=500)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--tree-mb", type=float, default=0.0)
    p.add_argument("--cnn-mb", type=float, default=0.03)
    p.set_defaults(func=cmd_report_comm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
