import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.integrate import trapezoid

from kinefit.exceptions import InvalidInputError
from kinefit.services.hand_model import JOINT_COUNT, ROOT

logger = logging.getLogger(__name__)

METERS_TO_MM = 1000.0
DEFAULT_THRESHOLDS_3D = tuple(float(t) for t in range(0, 55, 5))
DEFAULT_THRESHOLDS_2D = tuple(float(t) for t in range(0, 32, 2))


@dataclass(frozen=True, eq=False)
class PckCurve:
    """Fraction of correct keypoints per threshold (mm in 3D, px in 2D)."""
    thresholds: np.ndarray
    values: np.ndarray
    mode: str

    def at(self, threshold: float) -> float:
        matches = np.flatnonzero(self.thresholds == threshold)
        if matches.size == 0:
            raise InvalidInputError(f"threshold {threshold} is not on the curve")
        return float(self.values[matches[0]])

    def auc(self) -> float:
        """Area under the curve over the threshold range, normalized to [0, 1]."""
        if self.thresholds.size < 2:
            return float(self.values[0]) if self.values.size else 0.0
        span = self.thresholds[-1] - self.thresholds[0]
        return float(trapezoid(self.values, self.thresholds) / span)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "fraction"])
            for threshold, value in zip(self.thresholds.tolist(), self.values.tolist()):
                writer.writerow([repr(threshold), repr(value)])


def _paired_errors(estimated, ground_truth, mode: str) -> np.ndarray:
    mode = mode.lower()
    if mode not in ("2d", "3d"):
        raise InvalidInputError(f"mode must be '2d' or '3d', got '{mode}'")
    estimated = np.asarray(estimated, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if len(estimated) != len(ground_truth):
        raise InvalidInputError(
            f"estimate has {len(estimated)} frames but ground truth has {len(ground_truth)}"
        )
    if len(estimated) == 0:
        raise InvalidInputError("no frames to evaluate")
    dim = 2 if mode == "2d" else 3
    for name, value in (("estimate", estimated), ("ground truth", ground_truth)):
        if value.ndim != 3 or value.shape[1:] != (JOINT_COUNT, dim):
            raise InvalidInputError(f"{name} must have shape (frames, {JOINT_COUNT}, {dim}), got {value.shape}")
    errors = np.linalg.norm(estimated - ground_truth, axis=-1)
    return errors * METERS_TO_MM if mode == "3d" else errors


def pck(
    estimated: Sequence[np.ndarray],
    ground_truth: Sequence[np.ndarray],
    thresholds: Sequence[float],
    mode: str = "3d",
) -> PckCurve:
    """
    Percentage of correct keypoints.

    A (frame, joint) pair is correct when its error is at most the threshold,
    so a zero threshold counts exact matches only. 3D joints are in meters and
    thresholds in millimetres; 2D joints and thresholds are in pixels.

    Raises:
        InvalidInputError: On length or shape mismatch, or an unknown mode.
    """
    errors = _paired_errors(estimated, ground_truth, mode)
    thresholds = np.sort(np.asarray(thresholds, dtype=float))
    if thresholds.size == 0 or np.any(thresholds < 0):
        raise InvalidInputError("thresholds must be a non-empty list of non-negative values")
    values = np.array([np.mean(errors <= threshold) for threshold in thresholds])
    return PckCurve(thresholds=thresholds, values=values, mode=mode.lower())


def mean_joint_error(estimated, ground_truth, mode: str = "3d") -> float:
    """Mean per-joint position error, millimetres in 3D or pixels in 2D."""
    return float(np.mean(_paired_errors(estimated, ground_truth, mode)))


def depth_normalize(estimated: Sequence[np.ndarray], ground_truth_root_z: Sequence[float]) -> np.ndarray:
    """
    Translate every estimated frame along z so its root depth matches the ground truth.

    x and y are untouched and the root's z equals the ground truth exactly,
    isolating articulation error from global depth error.
    """
    estimated = np.array(estimated, dtype=float)
    root_z = np.asarray(ground_truth_root_z, dtype=float)
    if len(estimated) != len(root_z):
        raise InvalidInputError(f"estimate has {len(estimated)} frames but {len(root_z)} root depths were given")
    if len(estimated) == 0:
        return estimated.reshape(0, JOINT_COUNT, 3)
    shift = root_z - estimated[:, ROOT, 2]
    estimated[:, :, 2] += shift[:, None]
    estimated[:, ROOT, 2] = root_z
    return estimated
