"""Command line entry point."""

from __future__ import annotations

import argparse
import logging
import shutil
import subprocess
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ValidationErrors, expand_experiment_matrix, load_config, validate_config
from .orchestrator import (
    MODE_ALIASES,
    InsufficientAllocation,
    OrchestratorError,
    ResourceOverCap,
    detect_environment,
    run_experiment,
    write_sbatch_scripts,
)
from .postprocess import RunLoadError, postprocess

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_ENVIRONMENT = 3


def _load(path: str):
    cfg = validate_config(load_config(path))
    return cfg, expand_experiment_matrix(cfg)


def cmd_validate(args: argparse.Namespace) -> int:
    cfg, runs = _load(args.config)
    print(f"{args.config}: ok, {len(runs)} run(s) in experiment {cfg['experiment_name']}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    mode = args.mode
    if mode == "slurm-batch" or (mode == "auto" and detect_environment().mode == "slurm_batch"):
        if not args.dry_run and shutil.which("sbatch") is None:
            print("error: sbatch not found on PATH; use --dry-run to only write scripts", file=sys.stderr)
            return EXIT_ENVIRONMENT
    summary = run_experiment(args.config, mode=mode, dry_run=args.dry_run, run_id=args.run_id)
    return EXIT_OK if summary.ok else EXIT_RUNTIME


def cmd_emit_sbatch(args: argparse.Namespace) -> int:
    _, runs = _load(args.config)
    paths = write_sbatch_scripts(runs, Path(args.config).resolve(), args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_postprocess(args: argparse.Namespace) -> int:
    result = postprocess(args.results, args.out, args.warmup)
    print(f"{len(result.reports)} run(s), {len(result.files)} file(s) written")
    for exp, slope in sorted(result.slopes.items()):
        print(f"{exp}: broker ingest vs offered rate slope {slope:.4f}")
    for r in result.reports:
        for v in r.violations:
            print(f"{r.experiment}/{r.run_id}: {v.kind}: {v.message}")
    return EXIT_OK if result.violations == 0 else EXIT_RUNTIME


def cmd_version(args: argparse.Namespace) -> int:
    print(f"strombench {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strombench", description="Stream processing benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config file and count its runs")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute or submit every run of an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=sorted(MODE_ALIASES), default="auto")
    p.add_argument("--dry-run", action="store_true", help="in batch mode, write scripts without submitting")
    p.add_argument("--run-id", help="execute only this run of the matrix")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("emit-sbatch", help="write one SLURM script per run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_sbatch)

    p = sub.add_parser("postprocess", help="validate and aggregate run directories")
    p.add_argument("--results", required=True)
    p.add_argument("--out", help="output directory (default: <results>/postprocessed)")
    p.add_argument("--warmup", type=float, default=0.1, help="fraction trimmed from each end")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("version", help="print the harness version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationErrors as exc:
        for path, msg in exc.errors:
            print(f"error: {path or '<root>'}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, FileNotFoundError, RunLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (InsufficientAllocation, ResourceOverCap) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except subprocess.CalledProcessError as exc:
        print(f"error: sbatch failed: {exc.stderr or exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except OrchestratorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
