#!/usr/bin/env python3
"""
CLI entry point for the cell-free conjugate beamforming simulator.

Exit codes: 0 success, 1 halted run or output failure, 2 invalid configuration,
3 oracle mismatch.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import PRESET_DESCRIPTIONS, PRESETS, Config, build_spec, merge, preset_data
from .exceptions import ConfigError, HaltError, OracleFailure, OutputError
from .experiment import run_experiment
from .logger import SimLogger
from .models import ExperimentSpec
from .oracle import run_oracle_suite
from .storage import emit_outputs

EXIT_OK = 0
EXIT_HALT = 1
EXIT_CONFIG = 2
EXIT_ORACLE = 3


def _overrides(args) -> Dict[str, Any]:
    """Config mapping built from the command-line flags that were given."""
    data: Dict[str, Any] = {"system": {}, "experiment": {}, "outputs": {}}
    if getattr(args, "seed", None) is not None:
        data["system"]["seed"] = args.seed
    if getattr(args, "snapshots", None) is not None:
        data["experiment"]["snapshots"] = args.snapshots
    if getattr(args, "scheme", None):
        data["experiment"]["schemes"] = list(args.scheme)
    if getattr(args, "policy", None):
        data["experiment"]["power_policy"] = args.policy
    if getattr(args, "workers", None) is not None:
        data["experiment"]["workers"] = args.workers
    if getattr(args, "oracle_trials", None) is not None:
        data["oracle"] = {"trials": args.oracle_trials}
    if getattr(args, "out", None):
        out = Path(args.out)
        data["outputs"] = {"csv": str(out / "cdf.csv"), "summary": str(out / "summary.yaml")}
    return data


def resolve_spec(args, config: Config) -> ExperimentSpec:
    """
    Combine preset, config file and flags (later sources win).

    Args:
        args: Parsed CLI arguments
        config: Loaded configuration file (possibly empty)

    Returns:
        Validated ExperimentSpec
    """
    data = config.data
    if getattr(args, "preset", None):
        data = merge(preset_data(args.preset), data)
    return build_spec(merge(data, _overrides(args)))


def run_command(args, config: Config, logger: SimLogger) -> int:
    """
    Run an experiment and write its CDF table and summary.

    Args:
        args: Parsed CLI arguments (--preset, --snapshots, --seed, ...)
        config: Configuration instance
        logger: Logger instance
    """
    spec = resolve_spec(args, config)
    result = run_experiment(spec, logger)
    written = emit_outputs(result.table, result.summary, spec.outputs, logger)

    print(f"Snapshots: {spec.snapshots} per sweep point, {result.failures} failed")
    for scheme, metrics in result.summary["metrics"].items():
        for metric in sorted(metrics):
            if metric.startswith(("se", "min_se")) and "mean" in metrics[metric]:
                stats = metrics[metric]
                print(f"  {scheme:5s} {metric:20s} mean={stats['mean']:.4f} p5={stats['p5']:.4f}")
    for kind, path in written.items():
        print(f"Wrote {kind}: {path}")

    if result.oracle_failures:
        raise OracleFailure(
            f"{len(result.oracle_failures)} oracle comparisons failed", result.oracle_failures
        )
    return EXIT_OK


def oracle_command(args, config: Config, logger: SimLogger) -> int:
    """
    Run the small-instance equivalence suite (closed forms versus Monte Carlo).

    Args:
        args: Parsed CLI arguments (--instances, --trials, --seed, --z-threshold)
        config: Configuration instance
        logger: Logger instance
    """
    base = config.system
    checks = run_oracle_suite(
        base,
        instances=args.instances,
        trials=args.trials,
        seed=args.seed if args.seed is not None else base.seed,
        z_threshold=args.z_threshold,
        sim_logger=logger,
    )
    print(f"Oracle suite passed: {checks} comparisons over {args.instances} instances")
    return EXIT_OK


def presets_command(args, config: Config, logger: SimLogger) -> int:
    """List the built-in figure presets."""
    for name in sorted(PRESETS):
        print(f"  {name:6s} {PRESET_DESCRIPTIONS.get(name, 'alias of fig5a')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellfree-sim",
        description="Cell-free massive MIMO conjugate beamforming simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Reproduce the BU/DS sweep over N
  cellfree-sim run --preset fig1 --snapshots 100 --out results/fig1

  # MMF power control with a custom config
  cellfree-sim --config config/cellfree_config.yaml run --policy mmf --scheme ECB

  # Closed form versus Monte Carlo on random small instances
  cellfree-sim oracle --instances 20 --trials 100000

  # List presets
  cellfree-sim presets
        """,
    )
    parser.add_argument("--config", default=None, help="Path to YAML configuration file")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    run_parser = subparsers.add_parser("run", help="Run an experiment")
    run_parser.add_argument("--preset", choices=sorted(PRESETS), help="Figure preset")
    run_parser.add_argument("--snapshots", type=int, help="Snapshots per sweep point")
    run_parser.add_argument("--seed", type=int, help="Master seed")
    run_parser.add_argument(
        "--scheme",
        action="append",
        choices=["CB", "NCB", "ECB", "CBDT"],
        help="Scheme to evaluate (repeatable)",
    )
    run_parser.add_argument("--policy", choices=["maximal_ratio", "mmf"], help="Power policy")
    run_parser.add_argument(
        "--oracle-trials", type=int, metavar="T", help="Enable the oracle pass with T trials"
    )
    run_parser.add_argument("--out", metavar="DIR", help="Directory for cdf.csv / summary.yaml")
    run_parser.add_argument("--workers", type=int, help="Snapshot worker threads")

    oracle_parser = subparsers.add_parser("oracle", help="Run the oracle equivalence suite")
    oracle_parser.add_argument("--instances", type=int, default=20, help="Random instances")
    oracle_parser.add_argument("--trials", type=int, default=100_000, help="Trials per instance")
    oracle_parser.add_argument("--seed", type=int, help="Suite seed")
    oracle_parser.add_argument("--z-threshold", type=float, default=4.0, help="Pass threshold")

    subparsers.add_parser("presets", help="List figure presets")
    return parser


COMMANDS = {"run": run_command, "oracle": oracle_command, "presets": presets_command}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_HALT

    try:
        config = Config(args.config)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    logger = SimLogger(config.log_path, config.console_level)

    try:
        return COMMANDS[args.command](args, config, logger)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleFailure as e:
        for failure in e.failures:
            logger.error(f"Oracle mismatch: {failure}")
        print(f"Oracle failure: {e}", file=sys.stderr)
        return EXIT_ORACLE
    except HaltError as e:
        logger.log_halt(e.reason)
        print(f"Run halted: {e}", file=sys.stderr)
        return EXIT_HALT
    except OutputError as e:
        logger.error(f"Output error at {e.path}: {e}")
        print(f"Output error: {e}", file=sys.stderr)
        return EXIT_HALT


if __name__ == "__main__":
    sys.exit(main())
