"""
Per-frame minimization of the fitting energy.

The global rotation is re-initialized every frame from the predicted palm by
solving an orthogonal Procrustes problem; translation and articulation start
from the previous frame, except on a first frame where the translation is
solved in closed form from the rigid palm joints. Descent directions are
preconditioned by the damped Gauss-Newton normal matrix and accepted by an
Armijo backtracking line search, so the energy never increases.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, Field

from kinefit.exceptions import DegeneratePalmError, InvalidInputError, SolverDivergedError
from kinefit.services.camera import MIN_DEPTH, CameraIntrinsics
from kinefit.services.energy import EnergyWeights, FramePrediction, FrameEnergy, normalize_targets
from kinefit.services.hand_model import (
    DOF_COUNT,
    PALM_MCPS,
    ROOT,
    HandPose,
    Skeleton,
    articulate,
    euler_from_matrix,
)

logger = logging.getLogger(__name__)

PALM_EPS = 1e-9
ILL_CONDITIONED_SIGMA = 1e-9
METRIC_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class PalmFrame:
    """
    Palm directions Z = [y_index, y_middle, y_ring, y_pinky, n], shape (3, 5).

    y_k is the unit vector from the root to a non-thumb MCP joint and
    n = y_index x y_pinky approximates the palm-plane normal.
    """
    Z: np.ndarray


class SolverConfig(BaseModel):
    max_iters: int = Field(50, ge=1)
    step_size: float = Field(1.0, gt=0)
    step_decay: float = Field(1.0, gt=0, le=1)
    grad_tol: float = Field(1e-9, ge=0)
    armijo_c: float = Field(1e-4, gt=0, lt=1)
    max_backtracks: int = Field(30, ge=0)
    # False gives plain steepest descent
    precondition: bool = True
    # Levenberg-Marquardt scaling of the normal-matrix diagonal
    damping: float = Field(1e-3, ge=0)
    # Stop once an accepted step lowers the energy by less than this fraction
    energy_tol: float = Field(1e-7, ge=0)
    weights: EnergyWeights = Field(default_factory=EnergyWeights)

    model_config = {"frozen": True}

    @classmethod
    def accuracy(cls, **overrides) -> "SolverConfig":
        """Offline preset: 200 iterations per frame."""
        return cls(**{"max_iters": 200, **overrides})


class SolverState(Protocol):
    prev_pose: Optional[HandPose]
    prev_velocity: np.ndarray
    Zbar: Optional[PalmFrame]


@dataclass(frozen=True)
class SolveDiagnostics:
    initial_energy: float
    final_energy: float
    iterations: int
    grad_norm: float
    converged: bool
    energy_history: Tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class SolveResult:
    pose: HandPose
    diagnostics: SolveDiagnostics


def palm_frame(points: np.ndarray, skeleton: Optional[Skeleton] = None) -> PalmFrame:
    """
    Build the palm frame of a set of joint positions (model points or predictions).

    Raises:
        DegeneratePalmError: If an MCP joint coincides with the root.
    """
    points = np.asarray(points, dtype=float)
    directions = points[list(PALM_MCPS)] - points[ROOT]
    norms = np.linalg.norm(directions, axis=1)
    if np.any(norms < PALM_EPS):
        joint = PALM_MCPS[int(np.argmin(norms))]
        name = skeleton.names[joint] if skeleton is not None else f"joint {joint}"
        raise DegeneratePalmError(f"{name} coincides with the root; palm directions are undefined")
    y = directions / norms[:, None]
    normal = np.cross(y[0], y[3])
    return PalmFrame(Z=np.column_stack([y.T, normal]))


def model_palm_frame(skeleton: Skeleton) -> PalmFrame:
    """Palm frame of the model at identity global rotation."""
    kinematics = articulate(skeleton, np.zeros(3), np.zeros(DOF_COUNT))
    return palm_frame(kinematics.relative, skeleton)


def procrustes_rotation(Zbar: PalmFrame, Ztilde: PalmFrame) -> np.ndarray:
    """
    Rotation R in SO(3) minimizing |R Zbar - Ztilde|_F.

    With U S V^T the SVD of Ztilde Zbar^T, R = U diag(1, 1, det(U V^T)) V^T.
    A rank-deficient problem is logged and the SVD solution still returned.
    """
    U, sigma, Vt = np.linalg.svd(Ztilde.Z @ Zbar.Z.T)
    if sigma[1] < ILL_CONDITIONED_SIGMA:
        logger.warning(f"Ill-conditioned palm alignment (sigma = {sigma}); rotation is not unique")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def initialize_frame(
    tracker_state: Optional[SolverState],
    skeleton: Skeleton,
    pred: FramePrediction,
) -> HandPose:
    """
    Starting pose for a frame.

    The first frame starts from the neutral open hand 45 cm in front of the
    camera; later frames reuse the previous t and theta. The global rotation is
    always aligned to the predicted palm, falling back to the previous rotation
    when the predicted palm is degenerate.
    """
    prev_pose = getattr(tracker_state, "prev_pose", None)
    if prev_pose is None:
        start = HandPose.neutral()
    else:
        start = prev_pose

    Zbar = getattr(tracker_state, "Zbar", None)
    if Zbar is None:
        Zbar = model_palm_frame(skeleton)
    try:
        Ztilde = palm_frame(pred.x, skeleton)
    except DegeneratePalmError as e:
        logger.warning(f"Keeping previous global rotation: {e}")
        return HandPose(t=start.t, R=start.R, theta=start.theta)

    rotation = procrustes_rotation(Zbar, Ztilde)
    R = euler_from_matrix(rotation, reference=start.R)
    return HandPose(t=start.t, R=R, theta=start.theta)


def initialize_translation(
    skeleton: Skeleton,
    pred: FramePrediction,
    cam: CameraIntrinsics,
    start: HandPose,
) -> HandPose:
    """
    Closed-form translation from the detected palm.

    The root and the non-thumb MCP joints do not move under articulation, so
    with the global rotation of `start` fixed their detections are linear in t:
    X + t_x = a (Z + t_z) and Y + t_y = b (Z + t_z), with (a, b) the
    normalized image coordinates. The confidence-weighted least-squares t is
    returned; `start` is kept when fewer than two palm joints are visible, the
    system is rank deficient or the solution puts the palm behind the camera.
    """
    joints = [ROOT, *PALM_MCPS]
    omega = pred.omega[joints]
    if np.count_nonzero(omega) < 2:
        return start

    palm = articulate(skeleton, start.R, start.theta).relative[joints]
    a = (pred.u[joints, 0] - cam.cx) / cam.fx
    b = (pred.u[joints, 1] - cam.cy) / cam.fy
    A = np.zeros((2 * len(joints), 3))
    rhs = np.zeros(2 * len(joints))
    A[0::2, 0] = 1.0
    A[0::2, 2] = -a
    rhs[0::2] = a * palm[:, 2] - palm[:, 0]
    A[1::2, 1] = 1.0
    A[1::2, 2] = -b
    rhs[1::2] = b * palm[:, 2] - palm[:, 1]

    scale = np.repeat(np.sqrt(omega), 2)
    t, _, rank, _ = np.linalg.lstsq(A * scale[:, None], rhs * scale, rcond=None)
    if rank < 3 or np.min(palm[:, 2] + t[2]) <= MIN_DEPTH:
        logger.debug(f"Keeping initial translation {start.t.tolist()}: palm does not determine it")
        return start
    return HandPose(t=t, R=start.R, theta=start.theta)


def _descent_direction(config: SolverConfig, gradient: np.ndarray, normal: Optional[np.ndarray]) -> np.ndarray:
    if not config.precondition:
        return -gradient
    scale = np.diag(normal)
    metric = normal + np.diag(config.damping * scale + METRIC_FLOOR * max(1.0, float(scale.max())))
    try:
        direction = -np.linalg.solve(metric, gradient)
    except np.linalg.LinAlgError:
        direction = None
    if direction is None or not np.all(np.isfinite(direction)) or gradient @ direction >= 0:
        logger.debug("Normal matrix unusable; falling back to the gradient")
        return -gradient
    return direction


def solve_frame(
    skeleton: Skeleton,
    pred: FramePrediction,
    cam: CameraIntrinsics,
    config: SolverConfig,
    tracker_state: Optional[SolverState] = None,
) -> SolveResult:
    """
    Fit the hand model to one frame of predictions.

    Args:
        skeleton (Skeleton): User skeleton.
        pred (FramePrediction): (Filtered) detector output.
        cam (CameraIntrinsics): Camera intrinsics.
        config (SolverConfig): Iteration budget, line search and weights.
        tracker_state: Previous pose, previous velocity and cached model palm
            frame; None for a stand-alone first frame.

    Returns:
        SolveResult: Fitted pose and diagnostics.

    Raises:
        DegeneratePredictionError: If a predicted bone has zero length.
        SolverDivergedError: If the energy becomes non-finite; carries the
            last finite iterate.
    """
    targets = normalize_targets(skeleton, pred)
    start = initialize_frame(tracker_state, skeleton, pred)
    if getattr(tracker_state, "prev_pose", None) is None and config.weights.w2d > 0:
        start = initialize_translation(skeleton, pred, cam, start)
    energy = FrameEnergy(
        skeleton,
        cam,
        config.weights,
        pred=pred,
        targets=targets,
        prev_pose=getattr(tracker_state, "prev_pose", None),
        prev_velocity=getattr(tracker_state, "prev_velocity", None),
    )
    order = 2 if config.precondition else 1

    vector = start.as_vector()
    current = energy.evaluate(vector, order)
    if not (np.isfinite(current.value) and np.all(np.isfinite(current.gradient))):
        raise SolverDivergedError("energy is not finite at the initial pose", last_pose=start)
    history = [current.value]
    converged = False
    iterations = 0

    for k in range(config.max_iters):
        gradient = current.gradient
        if np.linalg.norm(gradient) < config.grad_tol:
            converged = True
            break
        direction = _descent_direction(config, gradient, current.normal)
        slope = float(gradient @ direction)

        step = config.step_size * config.step_decay ** k
        candidate = None
        for _ in range(config.max_backtracks + 1):
            trial_vector = vector + step * direction
            try:
                trial = energy.evaluate(trial_vector, order=0).value
            except InvalidInputError:
                trial = np.inf
            if np.isfinite(trial) and trial <= current.value + config.armijo_c * step * slope:
                candidate = trial_vector
                break
            step *= 0.5
        if candidate is None:
            # No decrease left at this resolution
            converged = True
            break

        evaluation = energy.evaluate(candidate, order)
        if not (np.isfinite(evaluation.value) and np.all(np.isfinite(evaluation.gradient))):
            raise SolverDivergedError(
                f"energy became non-finite at iteration {k + 1}",
                last_pose=HandPose.from_vector(vector),
            )
        decrease = current.value - evaluation.value
        vector, current = candidate, evaluation
        iterations += 1
        history.append(current.value)
        if decrease <= config.energy_tol * history[-2]:
            converged = True
            break

    diagnostics = SolveDiagnostics(
        initial_energy=history[0],
        final_energy=current.value,
        iterations=iterations,
        grad_norm=float(np.linalg.norm(current.gradient)),
        converged=converged,
        energy_history=tuple(history),
    )
    logger.debug(
        f"Solved frame in {iterations} iterations: energy {history[0]:.6g} -> {current.value:.6g}, "
        f"|grad| {diagnostics.grad_norm:.3g}"
    )
    return SolveResult(pose=HandPose.from_vector(vector), diagnostics=diagnostics)
