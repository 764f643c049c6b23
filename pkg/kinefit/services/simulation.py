"""
Synthetic detector: turns scripted hand motion into prediction streams with
controllable noise and occlusion, plus the matching ground truth.
"""

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, ValidationError, field_validator, model_validator
from scipy.spatial.transform import Rotation, Slerp

from kinefit.exceptions import ConfigError, ScriptInvalidError, SchemaError
from kinefit.services.camera import MIN_DEPTH, CameraIntrinsics, project_points
from kinefit.services.energy import FramePrediction, renormalize_relative
from kinefit.services.hand_model import (
    DOF_COUNT,
    EULER_ORDER,
    JOINT_COUNT,
    ROOT,
    HandPose,
    Skeleton,
    euler_from_matrix,
    forward_kinematics,
)

logger = logging.getLogger(__name__)

CANNED_SCRIPTS = ("wave", "grasp", "rotation_sweep")
DEFAULT_FPS = 30.0


class PoseDocument(BaseModel):
    t: List[float] = Field(..., min_length=3, max_length=3)
    R: List[float] = Field(..., min_length=3, max_length=3)
    theta: List[float] = Field(..., min_length=DOF_COUNT, max_length=DOF_COUNT)

    def to_pose(self) -> HandPose:
        return HandPose(t=self.t, R=self.R, theta=self.theta)


class Keyframe(BaseModel):
    time: float
    pose: PoseDocument


class MotionScript(BaseModel):
    """
    Keyframed hand motion. Between keyframes t and theta are interpolated
    linearly and the global rotation spherically.
    """
    name: str = "script"
    keyframes: List[Keyframe] = Field(..., min_length=1)
    _slerp: Optional[Slerp] = PrivateAttr(default=None)

    @field_validator("keyframes")
    @classmethod
    def times_strictly_increasing(cls, keyframes):
        times = [k.time for k in keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")
        return keyframes

    @model_validator(mode="after")
    def build_interpolator(self):
        if len(self.keyframes) > 1:
            rotations = Rotation.from_euler(EULER_ORDER, [k.pose.R for k in self.keyframes])
            self._slerp = Slerp(self.times, rotations)
        return self

    @property
    def times(self) -> np.ndarray:
        return np.array([k.time for k in self.keyframes])

    @property
    def start(self) -> float:
        return self.keyframes[0].time

    @property
    def duration(self) -> float:
        return self.keyframes[-1].time - self.keyframes[0].time

    def check_limits(self, skeleton: Skeleton) -> None:
        for k, keyframe in enumerate(self.keyframes):
            theta = np.asarray(keyframe.pose.theta)
            if np.any(theta < skeleton.theta_min) or np.any(theta > skeleton.theta_max):
                raise ScriptInvalidError(f"keyframe {k} of '{self.name}' violates the joint limits")

    def sample(self, time: float) -> HandPose:
        """Pose at `time`, clamped to the script's time range."""
        if self._slerp is None:
            return self.keyframes[0].pose.to_pose()
        times = self.times
        time = float(np.clip(time, times[0], times[-1]))
        t = np.array([np.interp(time, times, [k.pose.t[i] for k in self.keyframes]) for i in range(3)])
        theta = np.array([
            np.interp(time, times, [k.pose.theta[i] for k in self.keyframes]) for i in range(DOF_COUNT)
        ])
        # Linear Euler interpolation only picks the branch closest to the keyframes
        reference = np.array([np.interp(time, times, [k.pose.R[i] for k in self.keyframes]) for i in range(3)])
        R = euler_from_matrix(self._slerp([time]).as_matrix()[0], reference=reference)
        return HandPose(t=t, R=R, theta=theta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MotionScript":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"motion script not found: {path}")
        try:
            return cls.model_validate_json(path.read_text())
        except ValidationError as e:
            raise SchemaError(f"invalid motion script {path}: {e}")


def load_canned_script(name: str) -> MotionScript:
    """One of the packaged scripts: wave, grasp or rotation_sweep."""
    if name not in CANNED_SCRIPTS:
        raise ConfigError(f"unknown canned script '{name}', expected one of {', '.join(CANNED_SCRIPTS)}")
    text = resources.files("kinefit.data.scripts").joinpath(f"{name}.json").read_text()
    return MotionScript.model_validate_json(text)


class NoiseSpec(BaseModel):
    sigma_2d: float = Field(0.0, ge=0)
    sigma_3d: float = Field(0.0, ge=0)
    omega_range: Tuple[float, float] = (1.0, 1.0)
    occlusion_prob: float = Field(0.0, ge=0, le=1)
    occlusion_sigma_2d: float = Field(40.0, ge=0)
    seed: int = 0

    model_config = {"frozen": True}

    @field_validator("omega_range")
    @classmethod
    def range_inside_unit_interval(cls, value):
        lo, hi = value
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("omega_range must satisfy 0 <= lo <= hi <= 1")
        return value

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NoiseSpec":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"noise spec not found: {path}")
        try:
            return cls.model_validate_json(path.read_text())
        except ValidationError as e:
            raise SchemaError(f"invalid noise spec {path}: {e}")


@dataclass(frozen=True, eq=False)
class SimulationResult:
    timestamps: np.ndarray
    predictions: List[FramePrediction]
    poses: List[HandPose]
    joints: np.ndarray       # (frames, 21, 3) meters
    joints_2d: np.ndarray    # (frames, 21, 2) exact projections

    def stream(self) -> List[Tuple[float, FramePrediction]]:
        return list(zip(self.timestamps.tolist(), self.predictions))


def frame_times(script: MotionScript, fps: float) -> np.ndarray:
    count = int(np.floor(script.duration * fps + 1e-9)) + 1
    return script.start + np.arange(count) / fps


def synthesize_predictions(
    skeleton: Skeleton,
    cam: CameraIntrinsics,
    script: MotionScript,
    noise: Optional[NoiseSpec] = None,
    fps: float = DEFAULT_FPS,
) -> SimulationResult:
    """
    Simulate detector output for a motion script.

    Per frame: forward kinematics gives the ground truth; u is its projection
    plus Gaussian noise; x is the ground truth in the middle-MCP / unit-wrist
    convention plus Gaussian noise (re-normalized afterwards); confidences are
    drawn from `omega_range`. Occluded joints get zero confidence and a heavily
    perturbed u. The random stream depends only on `noise.seed`.

    Raises:
        ScriptInvalidError: If a keyframe violates the joint limits or a joint
            ends up behind the camera.
    """
    noise = noise or NoiseSpec()
    if fps <= 0:
        raise ScriptInvalidError(f"fps must be positive, got {fps}")
    script.check_limits(skeleton)
    rng = np.random.default_rng(noise.seed)
    lo, hi = noise.omega_range

    timestamps = frame_times(script, fps)
    predictions, poses, all_joints, all_uv = [], [], [], []
    for k, time in enumerate(timestamps):
        pose = script.sample(time)
        joints = forward_kinematics(skeleton, pose)
        if np.any(joints[:, 2] <= MIN_DEPTH):
            raise ScriptInvalidError("a joint is at or behind the camera plane", frame=k)
        uv = project_points(cam, joints)

        noise_2d = rng.normal(0.0, noise.sigma_2d, size=(JOINT_COUNT, 2))
        noise_3d = rng.normal(0.0, noise.sigma_3d, size=(JOINT_COUNT, 3))
        omega = rng.uniform(lo, hi, size=JOINT_COUNT)
        occluded = rng.random(JOINT_COUNT) < noise.occlusion_prob
        occlusion_noise = rng.normal(0.0, noise.occlusion_sigma_2d, size=(JOINT_COUNT, 2))
        if np.all(occluded):
            occluded[ROOT] = False

        u = uv + noise_2d
        u[occluded] += occlusion_noise[occluded]
        omega[occluded] = 0.0
        x = renormalize_relative(joints - joints[ROOT])
        if noise.sigma_3d > 0:
            x = renormalize_relative(x + noise_3d)

        predictions.append(FramePrediction(u=u, omega=omega, x=x))
        poses.append(pose)
        all_joints.append(joints)
        all_uv.append(uv)

    logger.info(f"Simulated {len(timestamps)} frames of '{script.name}' at {fps:g} fps")
    return SimulationResult(
        timestamps=timestamps,
        predictions=predictions,
        poses=poses,
        joints=np.array(all_joints),
        joints_2d=np.array(all_uv),
    )
