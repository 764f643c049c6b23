import argparse
import logging

from kinefit.config import load_config
from kinefit.routers import CommandRouter, add_config_argument
from kinefit.services.solver import SolverConfig
from kinefit.services.tracking import track_sequence
from kinefit.utils.stream_io import read_prediction_stream, write_trajectory

logger = logging.getLogger(__name__)

router = CommandRouter()


def _arguments(parser: argparse.ArgumentParser) -> None:
    add_config_argument(parser)
    parser.add_argument("--predictions", required=True, help="prediction stream (JSON-Lines)")
    parser.add_argument("--out", required=True, help="trajectory output (JSON-Lines)")
    parser.add_argument("--accuracy", action="store_true", help="use the 200-iteration solver preset")


@router.command("track", help="Fit the hand model to every frame of a prediction stream", arguments=_arguments)
def track(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    solver = config.solver
    if args.accuracy:
        solver = SolverConfig.accuracy(**solver.model_dump(exclude={"max_iters"}))
    skeleton = config.load_skeleton()
    stream = read_prediction_stream(args.predictions)
    frames = track_sequence(skeleton, config.intrinsics, solver, stream, config.filter, config.tracking)
    write_trajectory(args.out, frames)
    return 0
