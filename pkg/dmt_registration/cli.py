"""Command-line entry point: ``reg <stage> --config FILE [--seed N] [--out DIR]``."""

import argparse
import json
import logging
import sys

from . import __version__
from .config import ConfigError, default_config_dict, load_config, output_root
from .stages import STAGES, run_stage

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reg",
        description="Denoised Mean Teacher point cloud registration experiments.",
    )
    parser.add_argument("stage", nargs="?", choices=list(STAGES), help="stage to run")
    parser.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument(
        "--out", help="output root (default: $DMT_OUTPUT_ROOT, else ./runs)"
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the complete default configuration and exit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.print_config:
        sys.stdout.write(json.dumps(default_config_dict(), indent=2) + "\n")
        return 0
    if args.stage is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("reg: error: a stage is required\n")
        return 2

    try:
        cfg = load_config(args.config, seed=args.seed)
    except ConfigError as e:
        sys.stderr.write(f"reg: error: {e}\n")
        return 1

    result = run_stage(args.stage, cfg, output_root(args.out))
    if not result.success:
        sys.stderr.write(f"reg: error: {result.message}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
