"""Command-line entry point (``pwhid``).

Exit codes: 0 success, 2 configuration error, 3 data or dimension error,
4 numerical failure (including a failed oracle check).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import experiment as exp
from .exceptions import (
    ConfigError,
    DegenerateSignalError,
    DivergenceError,
    IllConditionedError,
    PwhidError,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, exp.StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (IllConditionedError, DivergenceError, DegenerateSignalError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="INI config file")
    src.add_argument(
        "--paper", action="store_true",
        help="use the built-in defaults of the published simulation study",
    )
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--workers", type=int, help="parallel multistart workers")

    parser = argparse.ArgumentParser(
        prog="pwhid",
        description="Identify parallel Wiener-Hammerstein systems from Volterra kernels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a system and input/output data")

    p = sub.add_parser("estimate", parents=[common], help="least-squares Volterra kernels")
    p.add_argument("--input", required=True, help="input signal file")
    p.add_argument("--output", required=True, help="output signal file")

    p = sub.add_parser("decompose", parents=[common], help="multistart joint structured CPD")
    p.add_argument("--kernels", nargs="+", required=True, help="kernel files")
    p.add_argument("--truth", help="true model file, enables parameter errors")
    p.add_argument("--validation-input", help="validation input signal file")
    p.add_argument("--validation-output", help="validation output signal file")

    sub.add_parser("montecarlo", parents=[common], help="simulate, estimate and decompose")

    p = sub.add_parser("oracle-check", parents=[common], help="cross-module consistency gate")
    p.add_argument("--kernels", nargs="+", help="kernel files to check against --model")
    p.add_argument("--model", help="model file the kernel files should match")
    return parser


def _run(args) -> int:
    config = exp.load_config(
        None if args.paper else args.config, seed=args.seed, workers=args.workers, out=args.out
    )
    if args.command == "simulate":
        paths = exp.cmd_simulate(config)
        for name, path in paths.items():
            print(f"{name}: {path}")
    elif args.command == "estimate":
        res = exp.cmd_estimate(config, args.input, args.output)
        for d, path in res["kernels"].items():
            print(f"kernel d={d}: {path}")
        print(f"condition estimate: {res['diagnostics']['condition']:.4g}")
    elif args.command == "decompose":
        validation = None
        if args.validation_input or args.validation_output:
            if not (args.validation_input and args.validation_output):
                raise ConfigError("both --validation-input and --validation-output are needed", "validation")
            validation = (args.validation_input, args.validation_output)
        report = exp.cmd_decompose(config, args.kernels, args.truth, validation)
        _print_summary(report)
    elif args.command == "montecarlo":
        _print_summary(exp.cmd_montecarlo(config))
    elif args.command == "oracle-check":
        if bool(args.kernels) != bool(args.model):
            raise ConfigError("--kernels and --model go together", "oracle-check")
        report = exp.cmd_oracle_check(config, args.kernels, args.model)
        for c in report["checks"]:
            status = "PASS" if c["passed"] else "FAIL"
            print(f"{status} {c['name']}: observed {c['observed']:.3e} (tol {c['tolerance']:.0e})")
        return EXIT_OK if report["passed"] else EXIT_NUMERIC
    return EXIT_OK


def _print_summary(report: dict) -> None:
    keys = [
        "n_starts", "success_criterion", "success_count", "success_rate", "reference_rate",
        "best_cost", "best_parameter_error", "best_output_error", "cost_output_error_correlation",
    ]
    print(json.dumps({k: report[k] for k in keys if k in report}, indent=2))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (PwhidError, OSError, ValueError) as exc:
        print(f"pwhid {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
