"""Command line entry point.

    lighthoi <command> [--config run.yaml] [key.sub=value ...]

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import DATA_ROOT_ENV, ConfigError, load_config, write_run_record

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import STAGES

    p = _Parser(prog="lighthoi", description=f"Pace-induced guidance toolkit. Data root defaults to ${DATA_ROOT_ENV} or ./data.")
    p.add_argument("command", choices=sorted(STAGES))
    p.add_argument("--config", "-c", help="YAML run config")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides, e.g. sample.omega2=2.0")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, str(cfg["run"]["log_level"]).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    from .pipeline import STAGES

    try:
        write_run_record(cfg, cfg["run"]["out_dir"], args.command)
        STAGES[args.command](cfg)
    except ConfigError as e:
        logging.getLogger("lighthoi").error("invalid configuration for %s: %s", args.command, e)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - top-level guard maps failures to an exit code
        logging.getLogger("lighthoi").error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
