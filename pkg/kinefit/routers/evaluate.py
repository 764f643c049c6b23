import argparse
import logging
from typing import Optional, Sequence

from kinefit.exceptions import InvalidInputError
from kinefit.routers import CommandRouter
from kinefit.services.evaluation import (
    DEFAULT_THRESHOLDS_2D,
    DEFAULT_THRESHOLDS_3D,
    depth_normalize,
    mean_joint_error,
    pck,
)
from kinefit.services.hand_model import ROOT
from kinefit.utils.stream_io import read_trajectory, trajectory_joints

logger = logging.getLogger(__name__)

router = CommandRouter()


def _arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--est", required=True, help="estimated trajectory (JSON-Lines)")
    parser.add_argument("--gt", required=True, help="ground-truth trajectory (JSON-Lines)")
    parser.add_argument("--mode", choices=("2d", "3d"), default="3d")
    parser.add_argument("--out", required=True, help="PCK curve output (CSV)")
    parser.add_argument("--thresholds", help="comma-separated thresholds, mm for 3d and px for 2d")
    parser.add_argument("--depth-normalize", action="store_true", help="align estimated root depth to the ground truth (3d only)")


def parse_thresholds(text: Optional[str], mode: str) -> Sequence[float]:
    if not text:
        return DEFAULT_THRESHOLDS_2D if mode == "2d" else DEFAULT_THRESHOLDS_3D
    try:
        return [float(value) for value in text.split(",") if value.strip()]
    except ValueError:
        raise InvalidInputError(f"thresholds must be comma-separated numbers, got '{text}'")


@router.command("evaluate", help="PCK curve of an estimated trajectory against ground truth", arguments=_arguments)
def evaluate(args: argparse.Namespace) -> int:
    if args.depth_normalize and args.mode != "3d":
        raise InvalidInputError("--depth-normalize only applies to 3d evaluation")
    thresholds = parse_thresholds(args.thresholds, args.mode)
    gt_records = read_trajectory(args.gt)
    estimated = trajectory_joints(read_trajectory(args.est), args.mode)
    ground_truth = trajectory_joints(gt_records, args.mode)
    if args.depth_normalize:
        if len(estimated) != len(ground_truth):
            raise InvalidInputError(f"estimate has {len(estimated)} frames but ground truth has {len(ground_truth)}")
        estimated = depth_normalize(estimated, ground_truth[:, ROOT, 2])

    curve = pck(estimated, ground_truth, thresholds, args.mode)
    curve.to_csv(args.out)
    unit = "px" if args.mode == "2d" else "mm"
    logger.info(
        f"{args.mode} PCK over {len(estimated)} frames: AUC {curve.auc():.4f}, "
        f"mean error {mean_joint_error(estimated, ground_truth, args.mode):.3f} {unit}"
    )
    return 0
