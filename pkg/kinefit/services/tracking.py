import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from kinefit.exceptions import BehindCameraError, DegenerateInputError, InvalidTimestampError, SolverDivergedError
from kinefit.services.camera import CameraIntrinsics, project_points
from kinefit.services.energy import FramePrediction, pose_velocity
from kinefit.services.hand_model import PARAM_COUNT, HandPose, JointPositions, Skeleton, forward_kinematics
from kinefit.services.smoothing import FilterConfig, PredictionFilter
from kinefit.services.solver import PalmFrame, SolveDiagnostics, SolverConfig, model_palm_frame, solve_frame

logger = logging.getLogger(__name__)


class TrackingConfig(BaseModel):
    bbox_padding: float = Field(2.2, gt=0)
    bbox_min_side: float = Field(32.0, gt=0)

    model_config = {"frozen": True}


@dataclass(frozen=True)
class BoundingBox:
    """Square image region, center and side in pixels."""
    center: Tuple[float, float]
    side: float

    def intersects(self, width: int, height: int) -> bool:
        half = self.side / 2.0
        cx, cy = self.center
        return cx + half >= 0 and cx - half < width and cy + half >= 0 and cy - half < height

    def to_dict(self) -> dict:
        return {"center": list(self.center), "side": self.side}


@dataclass
class TrackerState:
    prev_pose: Optional[HandPose] = None
    prev_velocity: np.ndarray = field(default_factory=lambda: np.zeros(PARAM_COUNT))
    bbox: Optional[BoundingBox] = None
    Zbar: Optional[PalmFrame] = None
    frame_index: int = 0
    prev_timestamp: Optional[float] = None


@dataclass(frozen=True, eq=False)
class TrackedFrame:
    t: float
    frame_index: int
    pose: HandPose
    joints_world: JointPositions
    joints_2d: np.ndarray
    energy: float
    bbox: BoundingBox
    degraded: bool = False
    diagnostics: Optional[SolveDiagnostics] = None


def initial_bbox(image_size: Tuple[int, int]) -> BoundingBox:
    width, height = image_size
    return BoundingBox(center=(width / 2.0, height / 2.0), side=float(height))


def update_bbox(
    state: Optional[TrackerState],
    detections_2d: Optional[np.ndarray],
    image_size: Tuple[int, int],
    config: Optional[TrackingConfig] = None,
) -> BoundingBox:
    """
    Square box for the next frame, derived from this frame's 2D detections.

    On the first frame the box is centered with side equal to the image
    height; a later frame without detections keeps the previous box. Otherwise
    it is centered on the detection centroid with side `bbox_padding` times the
    larger detection extent, floored at `bbox_min_side` and capped at the
    image's smaller side. Detections entirely outside the image reset the box.
    """
    config = config or TrackingConfig()
    width, height = image_size
    if detections_2d is None:
        if state is not None and state.bbox is not None and state.frame_index > 0:
            return state.bbox
        return initial_bbox(image_size)

    detections = np.asarray(detections_2d, dtype=float)
    inside = (
        (detections[:, 0] >= 0) & (detections[:, 0] < width)
        & (detections[:, 1] >= 0) & (detections[:, 1] < height)
    )
    if not np.any(inside):
        logger.warning("All detections are outside the image; resetting the bounding box")
        return initial_bbox(image_size)

    centroid = detections.mean(axis=0)
    extent = float(np.max(detections.max(axis=0) - detections.min(axis=0)))
    side = min(max(config.bbox_padding * extent, config.bbox_min_side), float(min(width, height)))
    center = (
        float(np.clip(centroid[0], 0.0, width - 1.0)),
        float(np.clip(centroid[1], 0.0, height - 1.0)),
    )
    return BoundingBox(center=center, side=side)


class HandTracker:
    """
    Frame loop of one hand: filtering, per-frame fitting and state carry-over.

    One tracker owns one stream; it is not meant to be shared between threads.
    """

    def __init__(
        self,
        skeleton: Skeleton,
        cam: CameraIntrinsics,
        solver_config: Optional[SolverConfig] = None,
        filter_config: Optional[FilterConfig] = None,
        tracking_config: Optional[TrackingConfig] = None,
    ):
        self.skeleton = skeleton
        self.cam = cam
        self.solver_config = solver_config or SolverConfig()
        self.filter_config = filter_config or FilterConfig()
        self.tracking_config = tracking_config or TrackingConfig()
        self.reset()

    def reset(self) -> None:
        self.state = TrackerState(
            bbox=initial_bbox((self.cam.width, self.cam.height)),
            Zbar=model_palm_frame(self.skeleton),
        )
        self.prediction_filter = PredictionFilter(self.filter_config)

    def process(self, pred: FramePrediction, t: float) -> TrackedFrame:
        state = self.state
        if state.prev_timestamp is not None and not t > state.prev_timestamp:
            raise InvalidTimestampError(f"timestamp {t} does not follow {state.prev_timestamp}")

        bbox = state.bbox
        filtered = pred
        degraded = False
        diagnostics = None
        try:
            filtered = self.prediction_filter(pred, t)
            result = solve_frame(self.skeleton, filtered, self.cam, self.solver_config, state)
            pose, diagnostics = result.pose, result.diagnostics
            joints = forward_kinematics(self.skeleton, pose)
            joints_2d = project_points(self.cam, joints)
            energy = diagnostics.final_energy
        except (SolverDivergedError, BehindCameraError, DegenerateInputError) as e:
            logger.warning(f"Frame {state.frame_index} degraded, reusing previous pose: {e}")
            degraded = True
            pose = state.prev_pose or HandPose.neutral()
            joints = forward_kinematics(self.skeleton, pose)
            joints_2d = project_points(self.cam, joints)
            energy = float("nan")

        if state.prev_pose is None or degraded:
            velocity = np.zeros(PARAM_COUNT)
        else:
            velocity = pose_velocity(pose.as_vector(), state.prev_pose.as_vector())

        visible = filtered.omega > 0
        detections = filtered.u[visible] if np.any(visible) else filtered.u
        self.state = TrackerState(
            prev_pose=pose,
            prev_velocity=velocity,
            bbox=update_bbox(state, detections, (self.cam.width, self.cam.height), self.tracking_config),
            Zbar=state.Zbar,
            frame_index=state.frame_index + 1,
            prev_timestamp=float(t),
        )
        return TrackedFrame(
            t=float(t),
            frame_index=state.frame_index,
            pose=pose,
            joints_world=joints,
            joints_2d=joints_2d,
            energy=energy,
            bbox=bbox,
            degraded=degraded,
            diagnostics=diagnostics,
        )


def track_sequence(
    skeleton: Skeleton,
    cam: CameraIntrinsics,
    config: Optional[SolverConfig],
    prediction_stream: Iterable[Tuple[float, FramePrediction]],
    filter_config: Optional[FilterConfig] = None,
    tracking_config: Optional[TrackingConfig] = None,
) -> List[TrackedFrame]:
    """
    Track a whole stream of (timestamp, prediction) pairs.

    Deterministic given its inputs; an empty stream yields an empty list.
    """
    tracker = HandTracker(skeleton, cam, config, filter_config, tracking_config)
    frames = [tracker.process(pred, t) for t, pred in prediction_stream]
    degraded = sum(frame.degraded for frame in frames)
    logger.info(f"Tracked {len(frames)} frames ({degraded} degraded)")
    return frames
