"""Command-line entry point: ``dtfl run``, ``dtfl print-defaults``, ``dtfl selftest``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import dump_config, parse_config
from .errors import BadConfig, DtflError, ParseError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

log = logging.getLogger("dtfl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtfl", description="Digital-twin-assisted federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--print-defaults", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("--config", required=True, help="path to a section.key = value file")
    run.add_argument("--seed", type=int, default=None, help="first seed (overrides scenario.seed)")
    run.add_argument("--out", default=None, help="output directory (overrides experiment.output_dir)")

    sub.add_parser("print-defaults", help="print every config key with its default")
    sub.add_parser("selftest", help="check the formula oracles")
    return parser


def _cmd_run(args) -> int:
    from .experiments import run_experiment

    try:
        spec = parse_config(args.config)
        if args.seed is not None:
            spec = replace(spec, scenario=replace(spec.scenario, seed=args.seed))
        spec.validate()
    except (ParseError, BadConfig, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = run_experiment(spec, out_dir=args.out)
    except (DtflError, ArithmeticError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


def _cmd_selftest() -> int:
    from .selftest import run_checks

    rows = run_checks()
    for name, ok, expected, got in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: expected {expected!r}, got {got!r}")
    return EXIT_OK if all(r[1] for r in rows) else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.print_defaults or args.command == "print-defaults":
        sys.stdout.write(dump_config())
        return EXIT_OK
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "selftest":
        return _cmd_selftest()
    parser.print_help()
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
