# KPAlign - desk-scale direct keypoint regression
# Command-line entry point: gen-data, train, eval, ablate, gradcheck, infer

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from app.errors import KPAlignError
from app.routers import ablation, evaluate, gen_data, gradcheck, infer, train

logger = logging.getLogger(__name__)

ROUTERS = [gen_data, train, evaluate, ablation, gradcheck, infer]


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("KPALIGN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: built-in defaults, see configs/default.json)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted override applied after the file, e.g. --set train.base_lr=0.02",
    )
    common.add_argument("--output-dir", help="Run directory (default: $KPALIGN_RUNS_DIR/<output_dir>)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="kpalign", description="Dense keypoint regression with keypoint alignment")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for router in ROUTERS:
        router.register(subparsers, [common])
    return parser


def command_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on runtime failure, 2 on bad configuration."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except KPAlignError as e:
        logger.error(f"❌ {e.error_type} during {args.command}: {e.message}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning(f"⚠️ {args.command} interrupted")
        return 1
    except Exception as e:
        logger.exception(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(command_dispatch())
