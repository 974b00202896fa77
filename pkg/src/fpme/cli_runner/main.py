"""Command-line entry point: ``python3 -m fpme <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..domain_model import HypothesisError
from ..pme_solver import SolverAbort
from . import commands, io
from .config import ConfigError, ExperimentConfig, bundled_config, load_config

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER_ABORT = 3
EXIT_USAGE = 64

SUBCOMMANDS = ("simulate", "fit-exponents", "check-inequalities", "dual-diagnostics", "trace", "report")


def _masses(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("masses must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON (default: bundled delta_d1.json)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="seed for randomized test banks (overrides the config)")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="fpme", description="Weighted fractional porous medium experiments.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.add_parser("simulate", parents=[common], help="solve and run the configured checks")
    fit = sub.add_parser("fit-exponents", parents=[common], help="fit the smoothing exponents over several masses")
    fit.add_argument("--masses", type=_masses, help="comma-separated initial masses")
    ineq = sub.add_parser("check-inequalities", parents=[common], help="functional inequality suites")
    ineq.add_argument("--count", type=int, help="number of random fields")
    sub.add_parser("dual-diagnostics", parents=[common], help="weighted operator and duality identity")
    tr = sub.add_parser("trace", parents=[common], help="recover the initial trace of a simulate run")
    tr.add_argument("run_dir", type=Path)
    rep = sub.add_parser("report", parents=[common], help="aggregate run summaries into one CSV")
    rep.add_argument("run_dirs", type=Path, nargs="+")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config if args.config else bundled_config())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed}, cfg.base_dir)
    return cfg


def _out(args, default: str) -> Path:
    return args.out if args.out is not None else Path(default)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is None or first not in SUBCOMMANDS:
        if first is not None:
            print(f"fpme: unknown subcommand {first!r}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "trace":
            return commands.trace(args.run_dir, args.out)
        if args.command == "report":
            return commands.report(args.run_dirs, args.out)
        cfg = _config(args)
        if args.command == "simulate":
            return commands.simulate(cfg, _out(args, "fpme_run"))
        if args.command == "fit-exponents":
            return commands.fit_exponents(cfg, _out(args, "fpme_fit"), args.masses)
        if args.command == "check-inequalities":
            if args.count is not None and args.count < 2:
                raise ConfigError("--count must be at least 2")
            return commands.check_inequalities(cfg, _out(args, "fpme_inequalities"), args.count)
        return commands.dual_diagnostics(cfg, _out(args, "fpme_dual"))
    except HypothesisError as exc:
        print(f"fpme: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"fpme: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverAbort as exc:
        print(f"fpme: solver aborted: {exc}", file=sys.stderr)
        for entry in exc.step_log[-10:]:
            print("  " + ", ".join(f"{k}={v}" for k, v in entry.items()), file=sys.stderr)
        if getattr(args, "out", None) is not None:
            io.dump_json(args.out / "step_log.json", {"error": str(exc), "steps": list(exc.step_log)})
        return EXIT_SOLVER_ABORT
