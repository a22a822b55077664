"""Command-line entry point.

Exit codes: 0 all checks pass, 1 an invariant check failed, 2 usage or
configuration error, 3 a pipeline stage failed.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_STAGE = 0, 1, 2, 3

log = logging.getLogger("blochpulse")

COMMANDS = {
    "bands": "tabulate band energies along the first dual axis",
    "resonances": "closure certificate and resonant quadruples",
    "couplings": "coupling constants of the mode system",
    "amplitudes": "evolve the amplitude system and track conserved quantities",
    "nls": "direct simulation of the scaled NLS from the leading-order ansatz",
    "convergence": "eps-sweep of the ansatz error with a log-log slope fit",
    "scenario": "run a preset scenario",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="blochpulse", description="Resonant Bloch wave packets in periodic cubic NLS.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML experiment file (defaults are used when omitted)")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "convergence":
            p.add_argument("--workers", type=int, help="parallel eps jobs")
        if name == "scenario":
            p.add_argument("--name", required=True, choices=pipeline.SCENARIOS)
    return parser


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.out:
        cfg.raw["output"] = args.out
    return cfg


def run(args):
    cfg = _load(args)
    if args.command == "convergence":
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
        return pipeline.run_convergence(cfg, args.workers)
    if args.command == "scenario":
        return pipeline.run_scenario(cfg, args.name)
    return getattr(pipeline, f"run_{args.command}")(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        outcome = run(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"blochpulse: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.StageError as exc:
        print(f"blochpulse: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for name, ok in sorted(outcome.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {outcome.name}.{name}")
    for path in outcome.files:
        log.info("wrote %s", path)
    return EXIT_OK if outcome.ok else EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
