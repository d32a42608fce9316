"""Command-line entry point.

    crosscare <command> <config.ini> [--seed N] [--output-dir DIR] [--workers N]

Commands: synth, cohort, label, featurize, train, evaluate, and
reproduce (the whole pipeline in order).  Flags override the config
file; the worker count can also come from the CROSSCARE_WORKERS
environment variable (flag wins).  Exit codes: 0 success, 2 bad
configuration, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .catalog import default_catalog
from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import (
    MissingPrerequisite,
    ensure_run_dir,
    load_stays,
    stage_cohort,
    stage_evaluate,
    stage_featurize,
    stage_label,
    stage_synth,
    stage_train,
)

COMMANDS = ("synth", "cohort", "label", "featurize", "train", "evaluate", "reproduce")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosscare",
        description="Multi-site ICU prediction experiments from one config file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} stage")
        cmd.add_argument("config", help="path to the experiment INI file")
        cmd.add_argument("--seed", type=int, help="override run.seed")
        cmd.add_argument("--output-dir", help="override run.output_dir")
        cmd.add_argument(
            "--workers", type=int,
            help="parallel matrix cells (default: CROSSCARE_WORKERS or all cores)",
        )
    return parser


def _resolve_workers(flag) -> int:
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get("CROSSCARE_WORKERS")
        if raw is None:
            return os.cpu_count() or 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError("CROSSCARE_WORKERS", f"expected an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("workers", f"must be >= 1, got {value}")
    return value


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        if not 0 <= args.seed < 2**63:
            raise ConfigError("run.seed", f"must be in [0, 2^63), got {args.seed}")
        config = dataclasses.replace(
            config, seed=args.seed, train=dataclasses.replace(config.train, seed=args.seed)
        )
    if args.output_dir is not None:
        if not args.output_dir.strip():
            raise ConfigError("run.output_dir", "must not be empty")
        config = dataclasses.replace(config, output_dir=args.output_dir)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        workers = _resolve_workers(args.workers)
    except FileNotFoundError as exc:
        print(f"config error: cannot read {exc.filename}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        root = ensure_run_dir(config)
        print(f"run directory: {root}")
        _dispatch(args.command, config, root, workers)
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failure: report, do not traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


def _dispatch(command: str, config: ExperimentConfig, root: str, workers: int) -> None:
    catalog = default_catalog()
    if command == "synth" or (command == "reproduce" and config.domains):
        counts = stage_synth(config, root)
        for domain, n in sorted(counts.items()):
            print(f"synth: {domain}: {n} stays")
        if command == "synth":
            return

    stays = load_stays(config, root, catalog)

    if command in ("cohort", "reproduce"):
        included = stage_cohort(config, root, stays, catalog)
        for task, ids in included.items():
            print(f"cohort: {task}: {len(ids)} stays included")
        if command == "cohort":
            return
    if command in ("label", "reproduce"):
        stage_label(config, root, stays, catalog)
        print(f"label: tracks written for {', '.join(config.tasks)}")
        if command == "label":
            return
    if command in ("featurize", "reproduce"):
        stage_featurize(config, root, stays, catalog)
        print("featurize: tensor dumps written")
        if command == "featurize":
            return
    if command in ("train", "reproduce"):
        n_models = stage_train(config, root, stays, catalog, workers)
        print(f"train: {n_models} fold models saved")
        if command == "train":
            return
    result = stage_evaluate(config, root, stays, catalog, workers)
    print(f"evaluate: {len(result.reports)} matrix cells scored")
    for report in result.reports:
        print(
            f"  {report.task} {report.setting} {'+'.join(report.train_domains)}"
            f" -> {report.test_domain}: {report.mean_auroc:.3f} (se {report.se:.3f})"
        )


if __name__ == "__main__":
    sys.exit(main())
