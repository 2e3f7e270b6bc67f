#!/usr/bin/env python3
"""
QKeyMesh command line

    python -m qkeymesh validate SCENARIO
    python -m qkeymesh run SCENARIO [--seed N] [--duration S] [--out DIR]
                                    [--log-level LEVEL] [--events]
    python -m qkeymesh config

Exit codes: 0 ok, 2 scenario invalid, 3 invariant violation, 1 anything else.
"""

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__, config
from .errors import InvariantViolation, ScenarioInvalid
from .simnet.runner import run
from .simnet.scenario import load_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_INVARIANT = 3


def setup_logging(level: str = None):
    logging.basicConfig(
        level=getattr(logging, (level or config.LOG_LEVEL).upper(), logging.WARNING),
        format=config.LOG_FORMAT,
    )


def cmd_validate(path: str) -> int:
    """Validate a scenario file and list every problem found"""
    try:
        scenario = load_scenario(path)
    except ScenarioInvalid as e:
        print(f"❌ {path}: {len(e.errors)} error(s)")
        for error in e.errors:
            print(f"  {error}")
        return EXIT_INVALID
    print(f"✅ {path}: ok ({len(scenario.sites)} sites, {len(scenario.hosts)} hosts, "
          f"{len(scenario.links)} quantum links)")
    return EXIT_OK


def cmd_run(path: str, seed: Optional[int] = None, duration_s: Optional[float] = None,
            out_dir: Optional[str] = None, events: bool = False) -> int:
    """Run a scenario and write metrics.csv, summary.json and optionally events.log"""
    out_dir = out_dir or config.OUTPUT_DIR
    try:
        scenario = load_scenario(path)
        result = run(scenario, seed=seed, duration_s=duration_s, out_dir=out_dir, events=events)
    except ScenarioInvalid as e:
        print(f"❌ scenario invalid: {path}", file=sys.stderr)
        for error in e.errors:
            print(f"  {error}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantViolation as e:
        logger.error(f"[Sim] invariant violated: {e}")
        print(f"❌ invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT

    summary = result.record.summary
    print("=" * 60)
    print(f"{config.APP_NAME} run: {scenario.name} (seed {summary['seed']}, {summary['duration_s']}s)")
    print("=" * 60)
    for key in ("lambda", "demand_satisfied_ratio", "grants", "confirmed", "race_conflicts",
                "blocked_requests", "relays_completed", "events_executed"):
        print(f"  {key}: {summary[key]}")
    print(f"\nOutputs written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkeymesh", description=config.APP_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="check a scenario file")
    validate.add_argument("scenario", help="scenario JSON file")

    run_parser = sub.add_parser("run", help="simulate a scenario")
    run_parser.add_argument("scenario", help="scenario JSON file")
    run_parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run_parser.add_argument("--duration", type=float, default=None, help="override the simulated seconds")
    run_parser.add_argument("--out", default=None, help=f"output directory (default: {config.OUTPUT_DIR})")
    run_parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    run_parser.add_argument("--events", action="store_true", help="also write events.log")

    sub.add_parser("config", help="print the effective configuration")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(getattr(args, "log_level", None))
    try:
        if args.command == "validate":
            return cmd_validate(args.scenario)
        if args.command == "run":
            return cmd_run(args.scenario, args.seed, args.duration, args.out, args.events)
        config.print_config()
        return EXIT_OK
    except Exception as e:
        logger.exception(f"[Sim] {args.command} failed: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
