"""Experiment runner: config parsing, seeded execution, CSV/JSON emission.

Configs are flat ``key = value`` INI files with four sections (data,
partition, federation, run). Unknown sections or keys are rejected so a
typo cannot silently fall back to a default. Outputs per run:

* ``rounds.csv``   one row per round of global metrics
* ``clients.csv``  one row per (round, client)
* ``summary.json`` final-round stats plus convergence-window statistics

Identical (config, seed) invocations produce byte-identical files, for
any worker count.
"""

from __future__ import annotations

import argparse
import configparser
import json
import statistics
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import seeds
from .data import ClientDataset, dirichlet_partition, gen_synthetic, load_idx, split_client, subset
from .federation import FederationConfig, RoundLog, Strategy, run_experiment
from .metrics import window_stats

ROUNDS_HEADER = "round,algo,global_f1,global_accuracy,avg_loss,var_f1,participants"
CLIENTS_HEADER = "round,client_id,f1,loss,alpha,weight,gamma,participated"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    source: str  # "synthetic" | "idx"
    images: str | None
    labels: str | None
    subset_size: int
    classes: int
    dims: int
    per_class: int
    separation: float
    concentration: float
    min_per_client: int
    holdout_fraction: float
    validation_fraction: float
    federation: FederationConfig
    output_dir: str
    label: str
    window: tuple[int, int] | None


_KNOWN_KEYS = {
    "data": {"source", "images", "labels", "subset", "classes", "dims", "per_class", "separation"},
    "partition": {"clients", "concentration", "min_per_client", "holdout_fraction",
                  "validation_fraction"},
    "federation": {"strategy", "rounds", "participation_fraction", "local_epochs",
                   "batch_size", "hidden", "optimizer", "learning_rate", "weight_decay",
                   "adam_beta1", "adam_beta2", "adam_eps", "eta", "error_threshold",
                   "epsilon", "beta", "ditto_lambda", "gamma_increment_all", "workers"},
    "run": {"seed", "label", "output_dir", "window_start", "window_end"},
}


class _Section:
    def __init__(self, name: str, values: Mapping):
        self.name = name
        self.values = values

    def get(self, key, default=None, required=False):
        if key in self.values:
            return self.values[key]
        if required:
            raise ConfigError(f"missing required key {key!r} in section [{self.name}]")
        return default

    def get_int(self, key, default=None, required=False, minimum=None):
        raw = self.get(key, required=required)
        if raw is None:
            return default
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} must be an integer, got {raw!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{self.name}] {key} must be >= {minimum}, got {value}")
        return value

    def get_float(self, key, default=None, required=False):
        raw = self.get(key, required=required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} must be a number, got {raw!r}") from None

    def get_bool(self, key, default=False):
        raw = self.get(key)
        if raw is None:
            return default
        lowered = str(raw).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} must be a boolean, got {raw!r}")


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate an experiment config file (fail closed)."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    def section(name: str) -> _Section:
        return _Section(name, dict(parser[name]) if parser.has_section(name) else {})

    data = section("data")
    partition = section("partition")
    fed = section("federation")
    run = section("run")

    source = data.get("source", required=True)
    if source not in ("synthetic", "idx"):
        raise ConfigError(f"[data] source must be 'synthetic' or 'idx', got {source!r}")
    images = labels = None
    classes = dims = per_class = 0
    separation = data.get_float("separation", default=3.0)
    if source == "idx":
        images = data.get("images", required=True)
        labels = data.get("labels", required=True)
        for p in (images, labels):
            if not Path(p).exists():
                raise ConfigError(f"[data] file does not exist: {p}")
    else:
        classes = data.get_int("classes", required=True, minimum=2)
        dims = data.get_int("dims", required=True, minimum=1)
        per_class = data.get_int("per_class", required=True, minimum=1)

    strategy_raw = fed.get("strategy", required=True)
    try:
        strategy = Strategy(strategy_raw)
    except ValueError:
        valid = ", ".join(s.value for s in Strategy)
        raise ConfigError(f"[federation] strategy must be one of {valid}, got {strategy_raw!r}") from None

    hidden_raw = fed.get("hidden", default="128")
    try:
        hidden = tuple(int(part) for part in str(hidden_raw).split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"[federation] hidden must be comma-separated integers, got {hidden_raw!r}") from None

    try:
        federation = FederationConfig(
            total_clients=partition.get_int("clients", required=True, minimum=2),
            total_rounds=fed.get_int("rounds", required=True, minimum=0),
            strategy=strategy,
            participation_fraction=fed.get_float("participation_fraction", default=1.0),
            local_epochs=fed.get_int("local_epochs", default=1, minimum=0),
            batch_size=fed.get_int("batch_size", default=32, minimum=1),
            hidden_layers=hidden,
            optimizer=fed.get("optimizer", default="sgd"),
            learning_rate=fed.get_float("learning_rate", default=1e-3),
            weight_decay=fed.get_float("weight_decay", default=0.0),
            adam_beta1=fed.get_float("adam_beta1", default=0.9),
            adam_beta2=fed.get_float("adam_beta2", default=0.999),
            adam_eps=fed.get_float("adam_eps", default=1e-8),
            eta=fed.get_float("eta", default=0.01),
            error_threshold=fed.get_float("error_threshold", default=0.3),
            epsilon=fed.get_float("epsilon", default=1e-6),
            beta=fed.get_float("beta", default=1.0),
            ditto_lambda=fed.get_float("ditto_lambda", default=0.1),
            gamma_increment_all=fed.get_bool("gamma_increment_all", default=False),
            workers=fed.get_int("workers", default=1, minimum=1),
            seed=run.get_int("seed", default=0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    window_start = run.get_int("window_start")
    window_end = run.get_int("window_end")
    if (window_start is None) != (window_end is None):
        raise ConfigError("[run] window_start and window_end must be given together")
    window = None
    if window_start is not None:
        if window_start < 1 or window_end < window_start:
            raise ConfigError(f"[run] invalid window {window_start}..{window_end}")
        window = (window_start, window_end)

    holdout_fraction = partition.get_float("holdout_fraction", default=0.2)
    validation_fraction = partition.get_float("validation_fraction", default=0.2)
    for name, frac in (("holdout_fraction", holdout_fraction),
                       ("validation_fraction", validation_fraction)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"[partition] {name} must be in (0, 1), got {frac}")

    concentration = partition.get_float("concentration", required=True)
    if not concentration > 0:
        raise ConfigError(f"[partition] concentration must be > 0, got {concentration}")

    return ExperimentConfig(
        source=source,
        images=images,
        labels=labels,
        subset_size=data.get_int("subset", default=0, minimum=0),
        classes=classes,
        dims=dims,
        per_class=per_class,
        separation=separation,
        concentration=concentration,
        min_per_client=partition.get_int("min_per_client", default=20, minimum=0),
        holdout_fraction=holdout_fraction,
        validation_fraction=validation_fraction,
        federation=federation,
        output_dir=run.get("output_dir", default="runs"),
        label=run.get("label", default=path.stem),
        window=window,
    )


def build_clients(cfg: ExperimentConfig) -> dict[int, ClientDataset]:
    """Materialize per-client datasets: load/generate, partition, split."""
    master = cfg.federation.seed
    if cfg.source == "idx":
        pool = load_idx(cfg.images, cfg.labels)
    else:
        pool = gen_synthetic(cfg.classes, cfg.dims, cfg.per_class, cfg.separation,
                             seed=seeds.spawn_seed(master, seeds.DATA))
    if cfg.subset_size and cfg.subset_size < pool.n:
        rng = seeds.spawn_rng(master, seeds.DATA, 1)
        keep = np.sort(rng.choice(pool.n, size=cfg.subset_size, replace=False))
        pool = subset(pool, keep)
    shards = dirichlet_partition(
        pool, cfg.federation.total_clients, cfg.concentration,
        seed=seeds.spawn_seed(master, seeds.PARTITION),
        min_per_client=cfg.min_per_client,
    )
    clients = {}
    for i, indices in enumerate(shards, start=1):
        clients[i] = split_client(
            subset(pool, indices), cfg.holdout_fraction, cfg.validation_fraction,
            seed=seeds.spawn_seed(master, seeds.SPLIT, i), client_id=i,
        )
    return clients


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(float(value))  # shortest round-trip decimal, numpy scalars normalized
    return str(value)


def write_csvs(logs: list[RoundLog], algo: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "rounds.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(ROUNDS_HEADER + "\n")
        for log in logs:
            f.write(",".join(_fmt(v) for v in (
                log.round_index, algo, log.global_f1, log.global_accuracy,
                log.avg_loss, log.var_f1, log.participants,
            )) + "\n")
    with open(out_dir / "clients.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(CLIENTS_HEADER + "\n")
        for log in logs:
            for row in log.clients:
                f.write(",".join(_fmt(v) for v in (
                    log.round_index, row.client_id, row.f1, row.loss,
                    row.alpha, row.weight, row.gamma, row.participated,
                )) + "\n")


def emit_summary(logs: list[RoundLog], window: tuple[int, int] | None = None) -> dict:
    """Final-round stats plus convergence-window mean variance with 95% CI.

    Without an explicit window the last min(10, rounds) rounds are used.
    """
    if not logs:
        raise ValueError("no round logs to summarize")
    final = logs[-1]
    if window is None:
        window = (max(1, len(logs) - 9), len(logs))
    mean, (ci_low, ci_high) = window_stats([log.var_f1 for log in logs], window)
    return {
        "rounds": len(logs),
        "final_round": final.round_index,
        "global_f1": final.global_f1,
        "global_accuracy": final.global_accuracy,
        "avg_loss": final.avg_loss,
        "var_f1": final.var_f1,
        "median_client_f1": statistics.median(row.f1 for row in final.clients),
        "window": {
            "start": window[0],
            "end": window[1],
            "var_f1_mean": mean,
            "var_f1_ci_low": ci_low,
            "var_f1_ci_high": ci_high,
        },
    }


def _build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedaboost",
        description="Run a federated-learning experiment and emit CSV/JSON metrics.",
    )
    parser.add_argument("--config", required=True, help="path to an INI experiment config")
    parser.add_argument("--algo", choices=[s.value for s in Strategy],
                        help="override the configured strategy")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", help="output directory (default: <output_dir>/<label>-<algo>)")
    parser.add_argument("--rounds", type=int, help="override the configured round count")
    parser.add_argument("--workers", type=int, help="override the configured worker count")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    args = _build_arg_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        fed = cfg.federation
        if args.algo is not None:
            fed = replace(fed, strategy=Strategy(args.algo))
        if args.seed is not None:
            fed = replace(fed, seed=args.seed)
        if args.rounds is not None:
            if args.rounds < 0:
                raise ConfigError("--rounds must be >= 0")
            fed = replace(fed, total_rounds=args.rounds)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            fed = replace(fed, workers=args.workers)
        cfg = replace(cfg, federation=fed)
        clients = build_clients(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.label}-{cfg.federation.strategy.value}"
    try:
        logs = run_experiment(cfg.federation, clients)
        write_csvs(logs, cfg.federation.strategy.value, out_dir)
        if logs:
            summary = emit_summary(logs, cfg.window)
            summary.update({
                "algo": cfg.federation.strategy.value,
                "label": cfg.label,
                "seed": cfg.federation.seed,
            })
            with open(out_dir / "summary.json", "w", encoding="utf-8", newline="\n") as f:
                json.dump(summary, f, indent=2, sort_keys=True)
                f.write("\n")
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
