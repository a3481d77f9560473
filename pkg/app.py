#!/usr/bin/env python3
"""
foslsflow - Two-Phase Flow Simulator

Command-line entry point.

    python app.py run [config] [--preset NAME] [--out DIR] [--uniform | --adaptive] [--levels N] [--steps N]
    python app.py verify [config]    # default RunConfig when no config is given

Exit codes: 0 success, 1 usage/configuration error or failed verification,
2 Newton nonconvergence.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from cli_io import PRESETS, ConfigError, RunOutputs, SnapshotIOError, load_config, write_config
from linsolve import SolverError
from nested_driver import NestedDriverError, NewtonDivergenceError, run_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NONCONVERGENCE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foslsflow", description="Nested-iteration FOSLS two-phase flow simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a simulation")
    run.add_argument("config", nargs="?", help="key = value configuration file")
    run.add_argument("--preset", choices=sorted(PRESETS), help="Built-in parameter set")
    run.add_argument("--out", dest="output_dir", help="Output directory")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--uniform", dest="refinement", action="store_const", const="uniform")
    mode.add_argument("--adaptive", dest="refinement", action="store_const", const="adaptive")
    run.add_argument("--levels", type=int, help="Grids visited per time step")
    run.add_argument("--steps", dest="max_time_steps", type=int, help="Number of time steps")

    verify = commands.add_parser("verify", help="Run the property checks")
    verify.add_argument("config", nargs="?", help="key = value configuration file (default: built-in coalescence settings)")
    return parser


def run_command(args: argparse.Namespace) -> int:
    overrides = {
        "output_dir": args.output_dir,
        "refinement": args.refinement,
        "levels": args.levels,
        "max_time_steps": args.max_time_steps,
    }
    config = load_config(args.config, preset=args.preset, overrides=overrides)
    outputs = RunOutputs.from_config(config)
    write_config(config, outputs.output_dir / "config.txt")
    runlog = run_simulation(config.driver_config(), config.test_case_spec(), outputs)
    averages = runlog.averages()
    logger.info(
        f"✓ Run complete: {averages['time_steps']} steps, avg {averages['avg_wu']:.2f} WU, "
        f"avg {averages['avg_elements']:.0f} elements"
    )
    return EXIT_OK


def verify_command(args: argparse.Namespace) -> int:
    import verify_suite

    return verify_suite.main(args.config)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        if args.command == "run":
            return run_command(args)
        return verify_command(args)
    except NewtonDivergenceError as e:
        logger.error(f"Nonconvergence: {e}")
        return EXIT_NONCONVERGENCE
    except (ConfigError, SnapshotIOError, NestedDriverError, SolverError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
