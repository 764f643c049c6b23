import argparse
import logging
from pathlib import Path

from kinefit.config import load_config
from kinefit.routers import CommandRouter, add_config_argument
from kinefit.services.simulation import (
    CANNED_SCRIPTS,
    DEFAULT_FPS,
    MotionScript,
    NoiseSpec,
    load_canned_script,
    synthesize_predictions,
)
from kinefit.utils.stream_io import write_ground_truth, write_prediction_stream

logger = logging.getLogger(__name__)

router = CommandRouter()


def _arguments(parser: argparse.ArgumentParser) -> None:
    add_config_argument(parser)
    parser.add_argument("--script", required=True, help=f"motion script path or one of {', '.join(CANNED_SCRIPTS)}")
    parser.add_argument("--noise", help="NoiseSpec JSON (default: noise free)")
    parser.add_argument("--out", required=True, help="prediction stream output (JSON-Lines)")
    parser.add_argument("--gt-out", help="ground-truth trajectory output (default: <out stem>.gt.jsonl)")
    parser.add_argument("--fps", type=float, default=DEFAULT_FPS, help="frame rate (default: %(default)s)")


def default_gt_path(out: str) -> Path:
    out = Path(out)
    return out.with_name(f"{out.stem}.gt.jsonl")


@router.command("simulate", help="Synthesize a prediction stream and its ground truth from a motion script", arguments=_arguments)
def simulate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.script in CANNED_SCRIPTS and not Path(args.script).is_file():
        script = load_canned_script(args.script)
    else:
        script = MotionScript.load(args.script)
    noise = NoiseSpec.load(args.noise) if args.noise else NoiseSpec()

    result = synthesize_predictions(config.load_skeleton(), config.intrinsics, script, noise, args.fps)
    write_prediction_stream(args.out, result.stream())
    write_ground_truth(args.gt_out or default_gt_path(args.out), result)
    return 0
