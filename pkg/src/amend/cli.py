"""Command-line entry point: ``amend <command> --config <file> [--set k=v ...]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .data import DatasetError, SynthConfigError
from .net import ConfigError, NumericError
from .pipeline import COMMANDS, MissingArtifactError, load_config, parse_override, run_all, run_command

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amend", description="Train and evaluate a routed mixture of trajectory experts.")
    parser.add_argument("command", choices=[*COMMANDS, "run"], help="pipeline stage to run ('run' chains all of them)")
    parser.add_argument("--config", help="JSON config with flat dotted keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; the value is parsed as JSON when possible")
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    parser.add_argument("--out", help="output directory (overrides the 'out' key)")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("amend")
    try:
        overrides = dict(parse_override(item) for item in args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        if args.command == "run":
            run_all(cfg)
        else:
            run_command(args.command, cfg)
    except (ConfigError, SynthConfigError, DatasetError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
