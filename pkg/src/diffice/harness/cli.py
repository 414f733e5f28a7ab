"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime failure
(missing upstream artifact, numerical divergence, I/O).
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..autodiff.tensor import NonFiniteError
from .config import ABLATION, METHODS, ConfigError, PROFILES, load_config
from .pipeline import MissingArtifact

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("synth", "train-diffusion", "train-classifier", "train-oracle", "train-features", "generate",
            "evaluate", "report", "all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; keys override built-in defaults")
    common.add_argument("--profile", choices=sorted(PROFILES), default="default",
                        help="built-in preset applied before --config (default: %(default)s)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", action="append", choices=METHODS + (ABLATION,),
                        help="method to generate (repeatable); default from config")
    common.add_argument("--jobs", type=int, help="worker processes for generation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="diffice", description="Iterative diffusion counterfactuals on synthetic planes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"synth": "render the synthetic dataset", "train-diffusion": "train the noise-prediction U-Net",
             "train-classifier": "train the segmenter and predictor", "train-oracle": "train the oracle scorer",
             "train-features": "train the guiding and evaluation feature extractors",
             "generate": "generate counterfactual records", "evaluate": "compute metric reports",
             "report": "render figures from reports", "all": "run every stage in order"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    gen = {}
    if args.method:
        gen["methods"] = list(dict.fromkeys(args.method))
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        gen["jobs"] = args.jobs
    if gen:
        over["generate"] = gen
    return over


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config, _overrides(args), args.profile)
    except UsageError as exc:
        print(f"diffice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"diffice: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")

    from . import pipeline
    from .report import cmd_report

    try:
        if args.command == "all":
            pipeline.run_all(config)
        elif args.command == "report":
            cmd_report(config)
        else:
            pipeline.STAGES[args.command](config)
    except MissingArtifact as exc:
        print(f"diffice {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NonFiniteError, OSError, RuntimeError, ValueError) as exc:
        print(f"diffice {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.command}: ok ({config.out})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
