"""
Fitting energy: 2D reprojection, 3D relative articulation, joint limits and
temporal smoothness, each with an analytic gradient w.r.t. the 26 pose
parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Protocol

import numpy as np
from pydantic import BaseModel, Field

from kinefit.exceptions import DegeneratePredictionError, InvalidInputError
from kinefit.services.camera import MIN_DEPTH, CameraIntrinsics, project_points, project_points_jacobian
from kinefit.services.hand_model import (
    JOINT_COUNT,
    MIDDLE_MCP,
    PARAM_COUNT,
    ROOT,
    HandPose,
    Skeleton,
    articulate,
    jacobian_from_kinematics,
)
from kinefit.utils import wrap_angles

logger = logging.getLogger(__name__)

# Joints at or behind the camera plane are pushed towards this depth
BEHIND_CAMERA_SAFE_DEPTH = 0.01
BEHIND_CAMERA_PENALTY = 1e6
BEHIND_CAMERA_STIFFNESS = 1e8
ROTATION = slice(3, 6)


@dataclass(frozen=True, eq=False)
class FramePrediction:
    """
    Detector output for one frame.

    u: (21, 2) heatmap maxima in pixels; omega: (21,) confidences;
    x: (21, 3) root-relative 3D joints with the middle MCP at the origin and
    unit wrist-to-middle-MCP distance.
    """
    u: np.ndarray
    omega: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        for name, shape in (("u", (JOINT_COUNT, 2)), ("omega", (JOINT_COUNT,)), ("x", (JOINT_COUNT, 3))):
            value = np.array(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise InvalidInputError(f"prediction.{name} must have shape {shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"prediction.{name} has non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if np.any(self.omega < 0):
            raise InvalidInputError("confidences must be non-negative")

    @classmethod
    def from_raw(cls, u: np.ndarray, omega: np.ndarray, x: np.ndarray) -> "FramePrediction":
        """Build a prediction, re-normalizing x to the middle-MCP / unit-wrist convention."""
        return cls(u=u, omega=omega, x=renormalize_relative(x))


@dataclass(frozen=True, eq=False)
class RelativeTargets:
    """User-specific root-relative joint targets z (meters)."""
    z: np.ndarray


class EnergyWeights(BaseModel):
    w2d: float = Field(1e-4, ge=0)
    w3d: float = Field(1.0, ge=0)
    wlimits: float = Field(10.0, ge=0)
    wtemp: float = Field(0.1, ge=0)

    model_config = {"frozen": True}


@dataclass(frozen=True, eq=False)
class EnergyResult:
    value: float
    gradient: np.ndarray
    terms: Dict[str, float] = field(default_factory=dict)


class TemporalPrior(Protocol):
    prev_pose: Optional[HandPose]
    prev_velocity: np.ndarray


def renormalize_relative(x: np.ndarray) -> np.ndarray:
    """Shift the middle MCP to the origin and scale the wrist to unit distance."""
    x = np.asarray(x, dtype=float)
    if x.shape != (JOINT_COUNT, 3):
        raise InvalidInputError(f"relative joints must have shape ({JOINT_COUNT}, 3), got {x.shape}")
    centered = x - x[MIDDLE_MCP]
    scale = np.linalg.norm(centered[ROOT])
    if not np.isfinite(scale) or scale < 1e-12:
        raise DegeneratePredictionError("middle_mcp")
    return centered / scale


def normalize_targets(skeleton: Skeleton, pred: FramePrediction) -> RelativeTargets:
    """
    Rescale the predicted relative joints bone by bone to the skeleton's bone lengths.

    z_root = 0 and z_j = z_p(j) + bone_length(j) * (x_j - x_p(j)) / |x_j - x_p(j)|,
    traversed root to leaf.

    Raises:
        DegeneratePredictionError: If a predicted bone has zero length.
    """
    x = pred.x
    z = np.zeros((JOINT_COUNT, 3))
    for j in range(1, JOINT_COUNT):
        p = skeleton.parent[j]
        bone = x[j] - x[p]
        length = np.linalg.norm(bone)
        if length < 1e-12:
            raise DegeneratePredictionError(skeleton.names[j])
        z[j] = z[p] + (skeleton.bone_length[j] / length) * bone
    return RelativeTargets(z=z)


def pose_velocity(pose: np.ndarray, prev_pose: np.ndarray) -> np.ndarray:
    """Backward difference of two pose vectors, rotation components wrapped to (-pi, pi]."""
    velocity = np.asarray(pose, dtype=float) - np.asarray(prev_pose, dtype=float)
    velocity[ROTATION] = wrap_angles(velocity[ROTATION])
    return velocity


class _Terms(NamedTuple):
    value: float
    gradient: Optional[np.ndarray]
    normal: Optional[np.ndarray]


def _e2d(cam: CameraIntrinsics, positions, jac, pred: FramePrediction, order: int) -> _Terms:
    front = positions[:, 2] > MIN_DEPTH
    d_positions = np.zeros((JOINT_COUNT, 3))
    value = 0.0
    normal = np.zeros((PARAM_COUNT, PARAM_COUNT)) if order > 1 else None

    if np.any(front):
        omega = pred.omega[front]
        residual = project_points(cam, positions[front]) - pred.u[front]
        value += float(np.sum(omega * np.sum(residual ** 2, axis=1)))
        if order > 0:
            proj_jac = project_points_jacobian(cam, positions[front])
            d_positions[front] = 2.0 * omega[:, None] * np.einsum("nij,ni->nj", proj_jac, residual)
            if order > 1:
                image_jac = np.einsum("nij,njp->nip", proj_jac, jac[front])
                rows = (np.sqrt(omega)[:, None, None] * image_jac).reshape(-1, PARAM_COUNT)
                normal += 2.0 * rows.T @ rows

    behind = ~front
    if np.any(behind):
        gap = BEHIND_CAMERA_SAFE_DEPTH - positions[behind, 2]
        value += float(np.sum(BEHIND_CAMERA_PENALTY + BEHIND_CAMERA_STIFFNESS * gap ** 2))
        logger.debug(f"{int(behind.sum())} joints at or behind the camera plane")
        if order > 0:
            d_positions[behind, 2] = -2.0 * BEHIND_CAMERA_STIFFNESS * gap
            if order > 1:
                rows = jac[behind, 2, :]
                normal += 2.0 * BEHIND_CAMERA_STIFFNESS * rows.T @ rows

    gradient = np.einsum("jk,jkp->p", d_positions, jac) if order > 0 else None
    return _Terms(value, gradient, normal)


def _e3d(relative, jac, targets: RelativeTargets, order: int) -> _Terms:
    residual = relative - targets.z
    value = float(np.sum(residual ** 2))
    gradient = normal = None
    if order > 0:
        # Root-relative positions do not depend on t
        gradient = np.zeros(PARAM_COUNT)
        gradient[3:] = 2.0 * np.einsum("jk,jkp->p", residual, jac[:, :, 3:])
        if order > 1:
            rows = jac[:, :, 3:].reshape(-1, PARAM_COUNT - 3)
            normal = np.zeros((PARAM_COUNT, PARAM_COUNT))
            normal[3:, 3:] = 2.0 * rows.T @ rows
    return _Terms(value, gradient, normal)


def _elimits(skeleton: Skeleton, theta: np.ndarray, order: int) -> _Terms:
    over = theta - skeleton.theta_max
    under = skeleton.theta_min - theta
    violation = np.maximum.reduce([np.zeros_like(theta), over, under])
    value = float(np.sum(violation ** 2))
    gradient = normal = None
    if order > 0:
        gradient = np.zeros(PARAM_COUNT)
        gradient[6:] = np.where(over > 0, 2.0 * over, 0.0) - np.where(under > 0, 2.0 * under, 0.0)
        if order > 1:
            normal = np.zeros((PARAM_COUNT, PARAM_COUNT))
            normal[6:, 6:] = np.diag(np.where(violation > 0, 2.0, 0.0))
    return _Terms(value, gradient, normal)


def _etemp(vector: np.ndarray, prev_vector: np.ndarray, prev_velocity: np.ndarray, order: int) -> _Terms:
    residual = prev_velocity - pose_velocity(vector, prev_vector)
    value = float(np.sum(residual ** 2))
    gradient = -2.0 * residual if order > 0 else None
    normal = 2.0 * np.eye(PARAM_COUNT) if order > 1 else None
    return _Terms(value, gradient, normal)


class Evaluation(NamedTuple):
    value: float
    gradient: Optional[np.ndarray]
    normal: Optional[np.ndarray]
    terms: Dict[str, float]


class FrameEnergy:
    """
    Weighted fitting energy of one frame, evaluated on raw 26-vectors.

    `evaluate(vector, order)` returns the value (order 0), plus the gradient
    (order 1), plus the Gauss-Newton normal matrix J^T W J used as the
    descent metric (order 2).
    """

    def __init__(
        self,
        skeleton: Skeleton,
        cam: CameraIntrinsics,
        weights: EnergyWeights,
        pred: Optional[FramePrediction] = None,
        targets: Optional[RelativeTargets] = None,
        prev_pose: Optional[HandPose] = None,
        prev_velocity: Optional[np.ndarray] = None,
    ):
        self.skeleton = skeleton
        self.cam = cam
        self.weights = weights
        self.pred = pred
        self.targets = targets
        self.prev_vector = None if prev_pose is None else prev_pose.as_vector()
        if prev_velocity is None:
            prev_velocity = np.zeros(PARAM_COUNT)
        self.prev_velocity = np.asarray(prev_velocity, dtype=float)
        if self.prev_velocity.shape != (PARAM_COUNT,):
            raise InvalidInputError(f"previous velocity must have {PARAM_COUNT} entries")

    def _active_terms(self):
        w = self.weights
        terms = []
        if self.pred is not None and w.w2d > 0:
            terms.append(("e2d", w.w2d))
        if self.targets is not None and w.w3d > 0:
            terms.append(("e3d", w.w3d))
        if w.wlimits > 0:
            terms.append(("elimits", w.wlimits))
        if self.prev_vector is not None and w.wtemp > 0:
            terms.append(("etemp", w.wtemp))
        return terms

    def evaluate(self, vector: np.ndarray, order: int = 1) -> Evaluation:
        vector = np.asarray(vector, dtype=float)
        if not np.all(np.isfinite(vector)):
            raise InvalidInputError("pose parameters must be finite")
        active = self._active_terms()
        kinematics = jac = None
        if any(name in ("e2d", "e3d") for name, _ in active):
            kinematics = articulate(self.skeleton, vector[ROTATION], vector[6:])
            if order > 0:
                jac = jacobian_from_kinematics(self.skeleton, kinematics, vector[ROTATION])

        value = 0.0
        gradient = np.zeros(PARAM_COUNT) if order > 0 else None
        normal = np.zeros((PARAM_COUNT, PARAM_COUNT)) if order > 1 else None
        values = {}
        for name, weight in active:
            if name == "e2d":
                term = _e2d(self.cam, kinematics.relative + vector[0:3], jac, self.pred, order)
            elif name == "e3d":
                term = _e3d(kinematics.relative, jac, self.targets, order)
            elif name == "elimits":
                term = _elimits(self.skeleton, vector[6:], order)
            else:
                term = _etemp(vector, self.prev_vector, self.prev_velocity, order)
            values[name] = term.value
            value += weight * term.value
            if order > 0:
                gradient += weight * term.gradient
            if order > 1:
                normal += weight * term.normal
        return Evaluation(value, gradient, normal, values)


def _result(term: _Terms) -> EnergyResult:
    return EnergyResult(value=term.value, gradient=term.gradient)


def e2d(skeleton: Skeleton, pose: HandPose, pred: FramePrediction, cam: CameraIntrinsics) -> EnergyResult:
    """
    sum_j omega_j |project(M_j) - u_j|^2 and its gradient.

    A joint at or behind the camera plane is not projected; it contributes a
    large constant penalty plus a quadratic pushing it towards positive depth.
    """
    kinematics = articulate(skeleton, pose.R, pose.theta)
    jac = jacobian_from_kinematics(skeleton, kinematics, pose.R)
    return _result(_e2d(cam, kinematics.relative + pose.t, jac, pred, order=1))


def e3d(skeleton: Skeleton, pose: HandPose, targets: RelativeTargets) -> EnergyResult:
    """sum_j |(M_j - M_root) - z_j|^2; its gradient w.r.t. t is exactly zero."""
    kinematics = articulate(skeleton, pose.R, pose.theta)
    jac = jacobian_from_kinematics(skeleton, kinematics, pose.R)
    return _result(_e3d(kinematics.relative, jac, targets, order=1))


def elimits(skeleton: Skeleton, pose: HandPose) -> EnergyResult:
    """Squared norm of the row-wise max of (0, theta - theta_max, theta_min - theta)."""
    return _result(_elimits(skeleton, pose.theta, order=1))


def etemp(pose: HandPose, prev_pose: HandPose, prev_velocity: np.ndarray) -> EnergyResult:
    """|prev_velocity - (pose - prev_pose)|^2 with wrapped rotation differences."""
    prev_velocity = np.zeros(PARAM_COUNT) if prev_velocity is None else np.asarray(prev_velocity, dtype=float)
    return _result(_etemp(pose.as_vector(), prev_pose.as_vector(), prev_velocity, order=1))


def total_energy(
    skeleton: Skeleton,
    pose: HandPose,
    pred: FramePrediction,
    targets: RelativeTargets,
    cam: CameraIntrinsics,
    weights: EnergyWeights,
    tracker_state: Optional[TemporalPrior] = None,
) -> EnergyResult:
    """
    Weighted sum of the four fitting terms.

    The temporal term is only active when `tracker_state` holds a previous pose.

    Returns:
        EnergyResult: Total value and gradient; `terms` holds the unweighted
        value of every active term.
    """
    prev_pose = getattr(tracker_state, "prev_pose", None)
    prev_velocity = getattr(tracker_state, "prev_velocity", None)
    energy = FrameEnergy(skeleton, cam, weights, pred, targets, prev_pose, prev_velocity)
    evaluation = energy.evaluate(pose.as_vector(), order=1)
    return EnergyResult(value=evaluation.value, gradient=evaluation.gradient, terms=dict(evaluation.terms))
