import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List

from .experiment import (
    CheckResult,
    configure_logging,
    run_experiment,
    summarize_checks,
    sweep,
    verify,
)


def default_config() -> Path:
    """Path of the experiment record shipped with the package."""
    return Path(resources.files("fsi_toolbox") / "configs" / "default.yaml")


def _config_path(args) -> Path:
    return Path(args.config) if args.config is not None else default_config()


def _checks(summary) -> List[CheckResult]:
    checks = summary.get("checks", {})
    return [CheckResult(name, **fields) for name, fields in checks.items()]


def run(args) -> int:
    outcome = run_experiment(_config_path(args), out=args.out, seed=args.seed)
    if outcome.status == 0:
        summary = outcome.summary
        print(
            f"lambda={summary['lambda']:.4f} N={summary['N']} "
            f"measured rate={summary['measured_rate']:.4f} -> {outcome.directory}"
        )
        if not summary.get("all_checks_passed", True):
            print(f"warning: {summarize_checks(_checks(summary))}")
    return outcome.status


def verify_config(args) -> int:
    outcome = verify(_config_path(args), out=args.out, seed=args.seed)
    checks = _checks(outcome.summary)
    for check in checks:
        mark = "pass" if check.passed else "FAIL"
        print(
            f"{mark:4}  {check.name:<28}{check.value:>12.4e}  ({check.threshold:.1e})"
        )
    print(summarize_checks(checks))
    return outcome.status


def sweep_config(args) -> int:
    outcome = sweep(
        _config_path(args), args.param, out=args.out, seed=args.seed, jobs=args.jobs
    )
    for entry in outcome.summary.get("entries", []):
        print(
            f"{outcome.summary['parameter']}={entry['value']}: status {entry['status']}"
            f", measured rate {entry.get('measured_rate')}"
        )
    return outcome.status


def main(argv=None):
    argparser = argparse.ArgumentParser(
        description="Feedback stabilization of a rigid body in a viscous fluid."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "config",
        metavar="config",
        type=str,
        nargs="?",
        default=None,
        help="path to the yaml experiment record (the bundled default if omitted)",
    )
    common.add_argument(
        "-o",
        "--out",
        action="store",
        type=Path,
        required=False,
        help="output directory, overrides Outputs.Directory",
    )
    common.add_argument(
        "-s",
        "--seed",
        action="store",
        type=int,
        required=False,
        help="random seed, overrides Configuration.Random Seed",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument(
        "-v", "--verbose", action="store_true", help="log solver details"
    )
    verbosity.add_argument(
        "-q", "--quiet", action="store_true", help="log warnings and errors only"
    )

    subparsers = argparser.add_subparsers(title="subcommands", dest="command")
    subparsers.required = True

    run_parser = subparsers.add_parser(
        "run", parents=[common], help="run an experiment and write its artifacts"
    )
    run_parser.set_defaults(func=run)

    verify_parser = subparsers.add_parser(
        "verify", parents=[common], help="run every property check and report"
    )
    verify_parser.set_defaults(func=verify_config)

    sweep_parser = subparsers.add_parser(
        "sweep", parents=[common], help="run one experiment per parameter value"
    )
    sweep_parser.add_argument(
        "-p",
        "--param",
        action="store",
        type=str,
        required=True,
        help="parameter and values, e.g. lambda=0.5,1,2 (lambda, lambda_factor, h, "
        "m, nu)",
    )
    sweep_parser.add_argument(
        "-j",
        "--jobs",
        action="store",
        type=int,
        default=1,
        help="number of sweep entries run in parallel",
    )
    sweep_parser.set_defaults(func=sweep_config)

    args = argparser.parse_args(argv)
    if args.verbose:
        configure_logging(logging.DEBUG)
    elif args.quiet:
        configure_logging(logging.WARNING)
    else:
        configure_logging(logging.INFO)
    sys.exit(args.func(args))
