"""Command-line interface for optocool."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .config import bundled_scenarios, load_scenario, validate
from .database import RunCatalog
from .exceptions import OptocoolError
from .runner import ScenarioRunner


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optocool",
        description="Feedback cooling of cavity-read-out mechanical oscillators: "
        "noise budgets, stochastic simulation, spectral fits and calibrations",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )
    parser.add_argument(
        "--catalog",
        help="DuckDB run catalog file (default: $OPTOCOOL_CATALOG or in-memory)",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Run command
    run_parser = subparsers.add_parser("run", help="Run a scenario")
    run_parser.add_argument("config", help="Scenario file or bundled scenario name")
    run_parser.add_argument("--seed", type=int, help="Override the scenario seed")
    run_parser.add_argument("--out", default="out", help="Output directory")
    run_parser.add_argument("--threads", type=int, help="Simulation worker threads")

    # Validate command
    validate_parser = subparsers.add_parser(
        "validate", help="Check a scenario without running it"
    )
    validate_parser.add_argument("config", help="Scenario file or bundled scenario name")

    subparsers.add_parser("list-scenarios", help="List bundled scenarios")

    runs_parser = subparsers.add_parser("runs", help="List catalogued runs")
    runs_parser.add_argument("--scenario", help="Only runs of this scenario")
    runs_parser.add_argument("--limit", type=int, default=20, help="Maximum rows")
    runs_parser.add_argument("--id", dest="run_id", help="Show one run (id or unique prefix)")
    runs_parser.add_argument("--stats", action="store_true", help="Show catalog statistics")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code.

    Exit codes: 0 success, 1 usage, 2 validation failure, 3 physics or
    runtime error, 4 I/O error.
    """
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )

    if not args.command:
        parser.print_help()
        return 1

    catalog_path = args.catalog or os.getenv("OPTOCOOL_CATALOG")
    try:
        if args.command == "run":
            with RunCatalog(catalog_path) as catalog:
                return run_scenario(args.config, Path(args.out), args.seed, args.threads, catalog)
        elif args.command == "validate":
            return validate_scenario(args.config)
        elif args.command == "list-scenarios":
            return list_scenarios()
        elif args.command == "runs":
            with RunCatalog(catalog_path) as catalog:
                if args.stats:
                    return show_stats(catalog)
                if args.run_id:
                    return show_run(catalog, args.run_id)
                return show_runs(catalog, args.scenario, args.limit)
        else:
            parser.print_help()
            return 1
    except OptocoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


def run_scenario(
    config: str,
    out_dir: Path,
    seed: Optional[int],
    threads: Optional[int],
    catalog: RunCatalog,
) -> int:
    scenario = load_scenario(config)
    runner = ScenarioRunner(scenario, out_dir, seed=seed, threads=threads, catalog=catalog)
    result = runner.run()

    print(f"{result.scenario} ({result.mode}) -> {result.out_dir}")
    for artifact in result.artifacts:
        print(f"  {artifact.path}  {artifact.sha256[:12]}  {artifact.bytes} B")
    for name, value in sorted(result.metrics.items()):
        print(f"  {name} = {value:.6g}")
    return 0


def validate_scenario(config: str) -> int:
    """Prints the validation report; exit code 2 when invalid."""
    report = validate(config)
    status = "valid" if report.valid else "invalid"
    print(f"{report.path}: {status}")
    for error in report.errors:
        print(f"  error: {error}")
    for warning in report.warnings:
        print(f"  warning: {warning}")
    return 0 if report.valid else 2


def list_scenarios() -> int:
    for name in bundled_scenarios():
        scenario = load_scenario(name)
        description = scenario.scenario.description
        print(f"{name:<16} {scenario.mode:<16} {description}")
    return 0


def show_runs(catalog: RunCatalog, scenario: Optional[str], limit: int) -> int:
    runs = catalog.list_runs(scenario, limit)
    if not runs:
        print("No runs recorded")
        return 0
    for run in runs:
        print(
            f"{run.started_at:%Y-%m-%d %H:%M:%S}  {run.id[:8]}  {run.scenario:<16} "
            f"{run.status:<7} exit={run.exit_code}  {run.out_dir}"
        )
    return 0


def show_run(catalog: RunCatalog, run_id: str) -> int:
    """Prints one run with its artifacts and metrics.

    Returns 1 when the id or prefix matches no run or more than one.
    """
    matches = catalog.match_run_ids(run_id)
    if len(matches) != 1:
        reason = "No run" if not matches else "Ambiguous run id"
        print(f"{reason}: {run_id}", file=sys.stderr)
        return 1
    run = catalog.get_run(matches[0])
    assert run is not None

    print(f"Run {run.id}")
    print(f"Scenario: {run.scenario} ({run.mode})")
    print(f"Status: {run.status} exit={run.exit_code}")
    print(f"Seed: {run.seed}")
    print(f"Config: {run.config_sha256}")
    print(f"Output: {run.out_dir}")
    if run.message:
        print(f"Message: {run.message}")
    for artifact in catalog.get_artifacts(run.id):
        print(f"  {artifact.path}  {artifact.sha256[:12]}  {artifact.bytes} B")
    for name, value in catalog.get_metrics(run.id).items():
        print(f"  {name} = {value:.6g}")
    return 0


def show_stats(catalog: RunCatalog) -> int:
    stats = catalog.get_catalog_stats()

    print("=== Run Catalog Statistics ===")
    print(f"Total runs: {stats['total_runs']}")
    print(f"Failed runs: {stats['failed_runs']}")
    print(f"Total artifacts: {stats['total_artifacts']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
