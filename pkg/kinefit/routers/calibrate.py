import argparse
import logging

import numpy as np

from kinefit.routers import CommandRouter
from kinefit.services.hand_model import JOINT_COUNT, Skeleton, calibrate_bone_lengths, load_default_skeleton
from kinefit.utils.stream_io import read_prediction_stream

logger = logging.getLogger(__name__)

router = CommandRouter()


def _arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--predictions", required=True, help="prediction stream of the hand held flat, parallel to the image")
    parser.add_argument("--skeleton-in", help="template skeleton (default: packaged hand)")
    parser.add_argument("--skeleton-out", required=True, help="calibrated skeleton output (JSON)")


@router.command("calibrate", help="Adapt skeleton bone lengths to a user from 2D detections", arguments=_arguments)
def calibrate(args: argparse.Namespace) -> int:
    template = Skeleton.load(args.skeleton_in) if args.skeleton_in else load_default_skeleton()
    stream = read_prediction_stream(args.predictions)
    detections = np.array([pred.u for _, pred in stream]).reshape(-1, JOINT_COUNT, 2)
    confidences = np.array([pred.omega for _, pred in stream]).reshape(-1, JOINT_COUNT)
    skeleton = calibrate_bone_lengths(detections, template, confidences)
    skeleton.save(args.skeleton_out)
    logger.info(f"Wrote calibrated skeleton to {args.skeleton_out}")
    return 0
