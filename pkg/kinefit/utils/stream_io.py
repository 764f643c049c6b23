"""
File formats: JSON-Lines prediction and trajectory streams, CSV curves.

Floats are written with Python's shortest round-trip repr, so write -> read is
lossless. Joint order is fixed: wrist, then thumb to pinky with four joints
each (MCP, PIP, DIP, tip; the thumb's CMC, MCP, IP, tip).
"""

import json
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from kinefit.exceptions import ConfigError, InvalidInputError, SchemaError, StreamParseError
from kinefit.services.energy import FramePrediction, renormalize_relative
from kinefit.services.hand_model import DOF_COUNT, JOINT_COUNT, HandPose
from kinefit.services.simulation import SimulationResult
from kinefit.services.tracking import TrackedFrame

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Vector2 = List[float]
Vector3 = List[float]


class FrameRecord(BaseModel):
    """One line of a prediction stream."""
    t: float
    u: List[Vector2] = Field(..., min_length=JOINT_COUNT, max_length=JOINT_COUNT)
    omega: List[float] = Field(..., min_length=JOINT_COUNT, max_length=JOINT_COUNT)
    x: List[Vector3] = Field(..., min_length=JOINT_COUNT, max_length=JOINT_COUNT)


class PoseRecord(BaseModel):
    t: Vector3 = Field(..., min_length=3, max_length=3)
    R: Vector3 = Field(..., min_length=3, max_length=3)
    theta: List[float] = Field(..., min_length=DOF_COUNT, max_length=DOF_COUNT)

    def to_pose(self) -> HandPose:
        return HandPose(t=self.t, R=self.R, theta=self.theta)


class BoxRecord(BaseModel):
    center: Vector2 = Field(..., min_length=2, max_length=2)
    side: float


class TrajectoryRecord(BaseModel):
    """One line of a trajectory stream (tracker output or simulator ground truth)."""
    t: float
    frame_index: int = Field(..., ge=0)
    pose: PoseRecord
    joints: List[Vector3] = Field(..., min_length=JOINT_COUNT, max_length=JOINT_COUNT)
    joints_2d: List[Vector2] = Field(..., min_length=JOINT_COUNT, max_length=JOINT_COUNT)
    energy: Optional[float] = None
    bbox: Optional[BoxRecord] = None
    degraded: bool = False


def _check_pairs(rows: Sequence[Sequence[float]], width: int, what: str, line_number: int) -> None:
    for j, row in enumerate(rows):
        if len(row) != width:
            raise SchemaError(f"{what}[{j}] must have {width} entries, got {len(row)}", line_number)


def _read_lines(path: PathLike):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"stream not found: {path}")
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise StreamParseError(f"malformed JSON: {e.msg}", line_number)
            if not isinstance(payload, dict):
                raise SchemaError("record must be a JSON object", line_number)
            yield line_number, payload


def _validate(model, payload: dict, line_number: int):
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise SchemaError(f"{location}: {first['msg']}", line_number)


def _write_lines(path: PathLike, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, allow_nan=False) + "\n")
            count += 1
    return count


def read_prediction_stream(path: PathLike) -> List[Tuple[float, FramePrediction]]:
    """
    Read a JSON-Lines prediction stream into (timestamp, prediction) pairs.

    Every line is {"t": seconds, "u": 21x2 pixels, "omega": 21 confidences,
    "x": 21x3 relative joints}; x is re-normalized on load. Blank lines are
    skipped.

    Raises:
        ConfigError: If the file does not exist.
        StreamParseError: On a line that is not valid JSON.
        SchemaError: On a wrong field, joint count or shape, or a frame
            whose confidences are all zero.
    """
    stream = []
    for line_number, payload in _read_lines(path):
        record = _validate(FrameRecord, payload, line_number)
        _check_pairs(record.u, 2, "u", line_number)
        _check_pairs(record.x, 3, "x", line_number)
        if not any(w > 0 for w in record.omega):
            raise SchemaError("all confidences are zero", line_number)
        try:
            prediction = FramePrediction(u=record.u, omega=record.omega, x=renormalize_relative(record.x))
        except InvalidInputError as e:
            raise SchemaError(str(e), line_number)
        stream.append((record.t, prediction))
    logger.info(f"Read {len(stream)} frames from {path}")
    return stream


def write_prediction_stream(path: PathLike, stream: Iterable[Tuple[float, FramePrediction]]) -> None:
    records = (
        {"t": float(t), "u": pred.u.tolist(), "omega": pred.omega.tolist(), "x": pred.x.tolist()}
        for t, pred in stream
    )
    count = _write_lines(path, records)
    logger.info(f"Wrote {count} frames to {path}")


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def tracked_frame_record(frame: TrackedFrame) -> dict:
    return {
        "t": frame.t,
        "frame_index": frame.frame_index,
        "pose": frame.pose.to_dict(),
        "joints": frame.joints_world.tolist(),
        "joints_2d": frame.joints_2d.tolist(),
        "energy": _finite_or_none(frame.energy),
        "bbox": frame.bbox.to_dict(),
        "degraded": frame.degraded,
    }


def write_trajectory(path: PathLike, frames: Iterable[TrackedFrame]) -> None:
    """Write tracker output; a non-finite energy (degraded frame) is stored as null."""
    count = _write_lines(path, (tracked_frame_record(frame) for frame in frames))
    logger.info(f"Wrote {count} tracked frames to {path}")


def write_ground_truth(path: PathLike, result: SimulationResult) -> None:
    """Write simulator ground truth in the trajectory format, with null energy and bbox."""
    records = (
        {
            "t": float(t),
            "frame_index": k,
            "pose": pose.to_dict(),
            "joints": joints.tolist(),
            "joints_2d": joints_2d.tolist(),
            "energy": None,
            "bbox": None,
            "degraded": False,
        }
        for k, (t, pose, joints, joints_2d) in enumerate(
            zip(result.timestamps.tolist(), result.poses, result.joints, result.joints_2d)
        )
    )
    count = _write_lines(path, records)
    logger.info(f"Wrote {count} ground-truth frames to {path}")


def read_trajectory(path: PathLike) -> List[TrajectoryRecord]:
    """
    Raises:
        ConfigError: If the file does not exist.
        StreamParseError: On a line that is not valid JSON.
        SchemaError: On a wrong field, joint count or shape.
    """
    records = []
    for line_number, payload in _read_lines(path):
        record = _validate(TrajectoryRecord, payload, line_number)
        _check_pairs(record.joints, 3, "joints", line_number)
        _check_pairs(record.joints_2d, 2, "joints_2d", line_number)
        records.append(record)
    logger.info(f"Read {len(records)} trajectory frames from {path}")
    return records


def trajectory_joints(records: Sequence[TrajectoryRecord], mode: str = "3d") -> np.ndarray:
    """Stack the joints of a trajectory: (frames, 21, 3) meters or (frames, 21, 2) pixels."""
    dim = 2 if mode.lower() == "2d" else 3
    if not records:
        return np.zeros((0, JOINT_COUNT, dim))
    if dim == 2:
        return np.array([r.joints_2d for r in records], dtype=float)
    return np.array([r.joints for r in records], dtype=float)
