"""Command-line entry point: ``fedfd run`` and ``fedfd check``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .checks import run_checks
from .config import ConfigError, load_config
from .errors import InvalidArgument, NumericError
from .experiment import run_experiment
from .numerics import DEFAULT_TAYLOR_ORDER


def _run(args) -> int:
    try:
        config = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    try:
        summary = run_experiment(config)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc} (metrics so far kept in {config.out_dir})",
              file=sys.stderr)
        return 3
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"final_acc={summary['final_acc']} best_acc={summary['best_acc']} "
          f"last10_mean={summary['last10_mean']} -> {config.out_dir}")
    return 0


def _check(args) -> int:
    failures = 0
    print(f"{'module':<13} {'invariant':<52} result")
    for module, name, ok, detail in run_checks(args.filter, args.taylor_order):
        failures += not ok
        print(f"{module:<13} {name:<52} {'PASS' if ok else 'FAIL'}  {detail}")
    print(f"{'all invariants hold' if not failures else f'{failures} invariant(s) failed'}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.set_defaults(func=_run)

    chk = sub.add_parser("check", help="run the invariant suite")
    chk.add_argument("--filter", metavar="MODULE",
                     choices=["numerics", "models", "aggregation", "distillation", "data", "cli"])
    chk.add_argument("--taylor-order", type=int, default=DEFAULT_TAYLOR_ORDER,
                     help=argparse.SUPPRESS)
    chk.set_defaults(func=_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
