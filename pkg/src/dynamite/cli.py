"""Command-line entry point: ``dynamite <stage> --config cfg.json [--out dir] [--threads N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, validate_config
from .data import DataError
from .pipeline import STAGES, InvariantError, render_report, run_all, run_stage
from .utils import ArtifactError

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_INVARIANT = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamite", description="Dynamic defense selection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=1)
    p = sub.add_parser("report", help="re-render the result tables from stored artifacts")
    p.add_argument("--out", required=True)
    p = sub.add_parser("validate", help="print the normalized configuration")
    p.add_argument("--config", required=True)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            sys.stdout.write(render_report(args.out))
            return EXIT_OK
        config = validate_config(args.config)
        if args.command == "validate":
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if args.command == "run-all":
            run_all(config, args.out, args.threads)
        else:
            run_stage(args.command, config, args.out, args.threads)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
