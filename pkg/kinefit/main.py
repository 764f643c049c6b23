from dotenv import load_dotenv
import argparse
import logging
import os
import sys
from typing import List, Optional

# Load environment variables first
load_dotenv(dotenv_path=os.path.join(os.getcwd(), '.env'))

from kinefit import __version__
from kinefit.exceptions import KinefitException
from kinefit.routers import calibrate, evaluate, simulate, track

logger = logging.getLogger(__name__)

USAGE_EXIT_CODE = 2


def include_router(subparsers, router) -> None:
    router.register(subparsers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinefit",
        description="Model-based 3D hand-pose fitting from 2D keypoints and relative 3D joint predictions",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include routers
    include_router(subparsers, track.router)
    include_router(subparsers, simulate.router)
    include_router(subparsers, evaluate.router)
    include_router(subparsers, calibrate.router)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLI entry point. Returns the process exit code: 0 on success, the
    exception's `exit_code` on a kinefit error, 2 on a usage error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_EXIT_CODE if e.code else 0

    # Configure logging
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.handler(args)
    except KinefitException as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"kinefit {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
