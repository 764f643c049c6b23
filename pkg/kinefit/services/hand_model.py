"""
Kinematic hand model: the 21-joint skeleton, the 26-parameter pose and
forward kinematics with its analytic Jacobian.
"""

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError
from scipy.spatial.transform import Rotation

from kinefit.exceptions import (
    ConfigError,
    DegenerateInputError,
    InsufficientDataError,
    InvalidInputError,
    SchemaError,
)
from kinefit.utils import wrap_angles

logger = logging.getLogger(__name__)

JOINT_COUNT = 21
DOF_COUNT = 20
PARAM_COUNT = 26
ROOT = 0
MIDDLE_MCP = 9
# Root children of the non-thumb fingers, index to pinky
PALM_MCPS = (5, 9, 13, 17)
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
JOINT_NAMES = ("wrist",) + tuple(
    f"{finger}_{slot}"
    for finger, slots in zip(
        FINGERS,
        [("cmc", "mcp", "ip", "tip")] + [("mcp", "pip", "dip", "tip")] * 4,
    )
    for slot in slots
)
EULER_ORDER = "XYZ"  # intrinsic: R = Rx(a) @ Ry(b) @ Rz(c)
NEUTRAL_DEPTH = 0.45
MIN_CALIBRATION_FRAMES = 30

# (21, 3) absolute or root-relative joint positions in meters
JointPositions = np.ndarray


@dataclass(frozen=True, eq=False)
class HandPose:
    """Global translation t (m), global rotation R (intrinsic XYZ Euler, rad) and 20 articulation angles."""
    t: np.ndarray
    R: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        for name, size in (("t", 3), ("R", 3), ("theta", DOF_COUNT)):
            value = np.array(getattr(self, name), dtype=float).reshape(-1)
            if value.shape != (size,):
                raise InvalidInputError(f"pose.{name} must have {size} entries, got {value.size}")
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"pose.{name} has non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def neutral(cls, depth: float = NEUTRAL_DEPTH) -> "HandPose":
        """Open hand on the optical axis, `depth` meters in front of the camera."""
        return cls(t=np.array([0.0, 0.0, depth]), R=np.zeros(3), theta=np.zeros(DOF_COUNT))

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "HandPose":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if vector.size != PARAM_COUNT:
            raise InvalidInputError(f"pose vector must have {PARAM_COUNT} entries, got {vector.size}")
        return cls(t=vector[0:3], R=vector[3:6], theta=vector[6:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.R, self.theta])

    def to_dict(self) -> Dict[str, List[float]]:
        return {"t": self.t.tolist(), "R": self.R.tolist(), "theta": self.theta.tolist()}


class DofDocument(BaseModel):
    axis: List[float] = Field(..., min_length=3, max_length=3)
    theta_index: int = Field(..., ge=0, lt=DOF_COUNT)
    min_rad: float
    max_rad: float


class JointDocument(BaseModel):
    name: str
    parent: Optional[str] = None
    bone_length_m: float = Field(0.0, ge=0.0)
    rest_offset: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    dofs: List[DofDocument] = Field(default_factory=list, max_length=2)


class SkeletonDocument(BaseModel):
    joints: List[JointDocument]


def _unit(vector: Sequence[float], what: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    norm = np.linalg.norm(vector)
    if not np.isfinite(norm) or norm < 1e-12:
        raise InvalidInputError(f"{what} must be a non-zero finite vector")
    return vector / norm


@dataclass(frozen=True, eq=False)
class Skeleton:
    """
    Kinematic tree of the hand.

    Joints are stored in topological order (every parent precedes its children);
    `parent[ROOT] == -1`. Each DOF rotates its joint about `dof_axis`, expressed in
    the joint frame after the preceding DOFs of the same joint.
    """
    names: Tuple[str, ...]
    parent: np.ndarray
    bone_length: np.ndarray
    rest_offsets: np.ndarray
    dof_joint: np.ndarray
    dof_axis: np.ndarray
    theta_min: np.ndarray
    theta_max: np.ndarray
    offsets: np.ndarray = field(init=False, repr=False)
    joint_dofs: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False)
    dof_subtree: np.ndarray = field(init=False, repr=False)
    levels: Tuple[np.ndarray, ...] = field(init=False, repr=False)
    lead_dofs: np.ndarray = field(init=False, repr=False)
    trail_dofs: np.ndarray = field(init=False, repr=False)
    paired_lead_dofs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arrays = {
            "parent": np.array(self.parent, dtype=int),
            "bone_length": np.array(self.bone_length, dtype=float),
            "rest_offsets": np.array(self.rest_offsets, dtype=float),
            "dof_joint": np.array(self.dof_joint, dtype=int),
            "dof_axis": np.array(self.dof_axis, dtype=float),
            "theta_min": np.array(self.theta_min, dtype=float),
            "theta_max": np.array(self.theta_max, dtype=float),
        }
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "names", tuple(self.names))
        self._validate()

        offsets = self.bone_length[:, None] * self.rest_offsets
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "joint_dofs", tuple(
            tuple(int(d) for d in np.flatnonzero(self.dof_joint == j)) for j in range(JOINT_COUNT)
        ))

        descendants = np.zeros((JOINT_COUNT, JOINT_COUNT), dtype=bool)
        for j in range(JOINT_COUNT - 1, 0, -1):
            p = self.parent[j]
            descendants[p, j] = True
            descendants[p] |= descendants[j]
        subtree = descendants[self.dof_joint]
        subtree.setflags(write=False)
        object.__setattr__(self, "dof_subtree", subtree)

        # Joints grouped by tree depth, and each joint's first and second DOF
        depth = np.zeros(JOINT_COUNT, dtype=int)
        for j in range(1, JOINT_COUNT):
            depth[j] = depth[self.parent[j]] + 1
        object.__setattr__(self, "levels", tuple(
            np.flatnonzero(depth == level) for level in range(1, int(depth.max()) + 1)
        ))
        lead = np.array([dofs[0] for dofs in self.joint_dofs if dofs], dtype=int)
        trail = np.array([dofs[1] for dofs in self.joint_dofs if len(dofs) > 1], dtype=int)
        paired = np.array([dofs[0] for dofs in self.joint_dofs if len(dofs) > 1], dtype=int)
        for name, value in (("lead_dofs", lead), ("trail_dofs", trail), ("paired_lead_dofs", paired)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def _validate(self):
        if len(self.names) != JOINT_COUNT or len(set(self.names)) != JOINT_COUNT:
            raise InvalidInputError(f"skeleton needs {JOINT_COUNT} uniquely named joints")
        if self.parent.shape != (JOINT_COUNT,) or self.parent[ROOT] != -1:
            raise InvalidInputError("joint 0 must be the unique root")
        for j in range(1, JOINT_COUNT):
            if not 0 <= self.parent[j] < j:
                raise InvalidInputError(
                    f"joint '{self.names[j]}' must come after its parent (tree must be acyclic with a single root)"
                )
        if self.bone_length.shape != (JOINT_COUNT,) or np.any(self.bone_length[1:] <= 0):
            raise InvalidInputError("every non-root joint needs a positive bone length")
        if self.rest_offsets.shape != (JOINT_COUNT, 3):
            raise InvalidInputError("rest_offsets must be 21x3")
        if self.dof_joint.shape != (DOF_COUNT,) or self.dof_axis.shape != (DOF_COUNT, 3):
            raise InvalidInputError(f"skeleton needs exactly {DOF_COUNT} DOFs")
        if np.any(self.dof_joint <= ROOT) or np.any(self.dof_joint >= JOINT_COUNT):
            raise InvalidInputError("DOFs must belong to non-root joints")
        counts = np.bincount(self.dof_joint, minlength=JOINT_COUNT)
        if np.any(counts > 2) or np.count_nonzero(counts) != 15:
            raise InvalidInputError("expected 15 articulated joints with one or two DOFs each")
        leaves = set(range(1, JOINT_COUNT)) - set(self.parent[1:].tolist())
        if any(counts[leaf] for leaf in leaves):
            raise InvalidInputError("finger tips carry no DOFs")
        if self.theta_min.shape != (DOF_COUNT,) or self.theta_max.shape != (DOF_COUNT,):
            raise InvalidInputError(f"angle limits must have {DOF_COUNT} entries")
        if np.any(self.theta_min > self.theta_max):
            raise InvalidInputError("theta_min must not exceed theta_max")

    def with_bone_lengths(self, bone_length: Sequence[float]) -> "Skeleton":
        return Skeleton(
            names=self.names,
            parent=self.parent,
            bone_length=bone_length,
            rest_offsets=self.rest_offsets,
            dof_joint=self.dof_joint,
            dof_axis=self.dof_axis,
            theta_min=self.theta_min,
            theta_max=self.theta_max,
        )

    def with_limits(self, theta_min: Sequence[float], theta_max: Sequence[float]) -> "Skeleton":
        return Skeleton(
            names=self.names,
            parent=self.parent,
            bone_length=self.bone_length,
            rest_offsets=self.rest_offsets,
            dof_joint=self.dof_joint,
            dof_axis=self.dof_axis,
            theta_min=theta_min,
            theta_max=theta_max,
        )

    @classmethod
    def from_document(cls, document: SkeletonDocument) -> "Skeleton":
        joints = document.joints
        if len(joints) != JOINT_COUNT:
            raise SchemaError(f"skeleton document must list {JOINT_COUNT} joints, got {len(joints)}")
        index = {joint.name: i for i, joint in enumerate(joints)}
        parent = []
        for joint in joints:
            if joint.parent is None:
                parent.append(-1)
            elif joint.parent in index:
                parent.append(index[joint.parent])
            else:
                raise SchemaError(f"joint '{joint.name}' names unknown parent '{joint.parent}'")

        dof_joint = np.full(DOF_COUNT, -1)
        dof_axis = np.zeros((DOF_COUNT, 3))
        theta_min = np.zeros(DOF_COUNT)
        theta_max = np.zeros(DOF_COUNT)
        for j, joint in enumerate(joints):
            for dof in joint.dofs:
                if dof_joint[dof.theta_index] != -1:
                    raise SchemaError(f"theta_index {dof.theta_index} is used twice")
                dof_joint[dof.theta_index] = j
                dof_axis[dof.theta_index] = _unit(dof.axis, f"axis of theta_index {dof.theta_index}")
                theta_min[dof.theta_index] = dof.min_rad
                theta_max[dof.theta_index] = dof.max_rad
        if np.any(dof_joint == -1):
            raise SchemaError(f"theta indices must cover 0..{DOF_COUNT - 1}")

        rest_offsets = np.zeros((JOINT_COUNT, 3))
        for j, joint in enumerate(joints):
            if parent[j] != -1:
                rest_offsets[j] = _unit(joint.rest_offset, f"rest_offset of '{joint.name}'")
        return cls(
            names=tuple(joint.name for joint in joints),
            parent=np.array(parent),
            bone_length=np.array([joint.bone_length_m for joint in joints]),
            rest_offsets=rest_offsets,
            dof_joint=dof_joint,
            dof_axis=dof_axis,
            theta_min=theta_min,
            theta_max=theta_max,
        )

    def to_document(self) -> SkeletonDocument:
        joints = []
        for j, name in enumerate(self.names):
            joints.append(JointDocument(
                name=name,
                parent=None if self.parent[j] == -1 else self.names[self.parent[j]],
                bone_length_m=float(self.bone_length[j]),
                rest_offset=self.rest_offsets[j].tolist(),
                dofs=[
                    DofDocument(
                        axis=self.dof_axis[d].tolist(),
                        theta_index=d,
                        min_rad=float(self.theta_min[d]),
                        max_rad=float(self.theta_max[d]),
                    )
                    for d in self.joint_dofs[j]
                ],
            ))
        return SkeletonDocument(joints=joints)

    @classmethod
    def from_json(cls, text: str) -> "Skeleton":
        try:
            document = SkeletonDocument.model_validate_json(text)
        except ValidationError as e:
            raise SchemaError(f"invalid skeleton document: {e}")
        return cls.from_document(document)

    def to_json(self) -> str:
        return self.to_document().model_dump_json(indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Skeleton":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"skeleton file not found: {path}")
        return cls.from_json(path.read_text())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_default_skeleton() -> Skeleton:
    """Average adult right hand shipped with the package."""
    text = resources.files("kinefit.data").joinpath("default_skeleton.json").read_text()
    return Skeleton.from_json(text)


class Kinematics(NamedTuple):
    """Intermediate state of one forward-kinematics traversal."""
    relative: np.ndarray      # (21, 3) positions relative to the root
    frames: np.ndarray        # (21, 3, 3) joint frame orientations in world
    dof_axes: np.ndarray      # (20, 3) DOF rotation axes in world
    global_rotation: np.ndarray


def rotation_matrix(euler: Sequence[float]) -> np.ndarray:
    return Rotation.from_euler(EULER_ORDER, np.asarray(euler, dtype=float)).as_matrix()


def euler_from_matrix(matrix: np.ndarray, reference: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Convert a rotation matrix to intrinsic XYZ Euler angles.

    XYZ angles have two solutions per rotation, (a, b, c) and
    (a + pi, pi - b, c + pi). With a `reference` the solution nearest to it is
    picked and unwrapped next to it so consecutive frames do not flip.
    """
    first = Rotation.from_matrix(matrix).as_euler(EULER_ORDER)
    if reference is None:
        return wrap_angles(first)
    reference = np.asarray(reference, dtype=float)
    second = first + np.array([np.pi, np.pi - 2.0 * first[1], np.pi])
    candidates = [reference + wrap_angles(c - reference) for c in (first, second)]
    return min(candidates, key=lambda c: float(np.sum((c - reference) ** 2)))


def articulate(skeleton: Skeleton, R: np.ndarray, theta: np.ndarray) -> Kinematics:
    """Traverse the kinematic tree for a global rotation and articulation, root at the origin."""
    global_rotation = rotation_matrix(R)
    local = Rotation.from_rotvec(skeleton.dof_axis * np.asarray(theta)[:, None]).as_matrix()
    lead, trail = skeleton.lead_dofs, skeleton.trail_dofs

    # Rotation of every joint relative to its parent frame
    joint_local = np.tile(np.eye(3), (JOINT_COUNT, 1, 1))
    joint_local[skeleton.dof_joint[lead]] = local[lead]
    trail_joints = skeleton.dof_joint[trail]
    joint_local[trail_joints] = joint_local[trail_joints] @ local[trail]

    relative = np.zeros((JOINT_COUNT, 3))
    frames = np.empty((JOINT_COUNT, 3, 3))
    frames[ROOT] = global_rotation
    for joints in skeleton.levels:
        parents = skeleton.parent[joints]
        relative[joints] = relative[parents] + np.einsum("nij,nj->ni", frames[parents], skeleton.offsets[joints])
        frames[joints] = frames[parents] @ joint_local[joints]

    # A joint's first DOF turns about its parent frame, the second one after the first
    dof_frames = frames[skeleton.parent[skeleton.dof_joint]]
    dof_frames[trail] = dof_frames[trail] @ local[skeleton.paired_lead_dofs]
    dof_axes = np.einsum("nij,nj->ni", dof_frames, skeleton.dof_axis)
    return Kinematics(relative, frames, dof_axes, global_rotation)


def _check_finite(vector: np.ndarray) -> None:
    if not np.all(np.isfinite(vector)):
        raise InvalidInputError("pose parameters must be finite")


def forward_kinematics_relative(skeleton: Skeleton, pose: HandPose) -> JointPositions:
    """M(Theta) - M_root(Theta); independent of t by construction."""
    _check_finite(pose.as_vector())
    return articulate(skeleton, pose.R, pose.theta).relative


def forward_kinematics(skeleton: Skeleton, pose: HandPose) -> JointPositions:
    """
    Compute the absolute joint positions M(Theta).

    Args:
        skeleton (Skeleton): Kinematic tree and bone lengths.
        pose (HandPose): Global translation, rotation and articulation.

    Returns:
        np.ndarray: (21, 3) joint positions in meters, camera frame.
    """
    return forward_kinematics_relative(skeleton, pose) + pose.t


def jacobian_from_kinematics(skeleton: Skeleton, kinematics: Kinematics, R: np.ndarray) -> np.ndarray:
    """dM/dTheta as a (21, 3, 26) array, built from an existing traversal."""
    relative = kinematics.relative
    jac = np.zeros((JOINT_COUNT, 3, PARAM_COUNT))
    jac[:, :, 0:3] = np.eye(3)

    # Intrinsic XYZ: world axes of the three Euler rotations
    a = R[0]
    euler_axes = np.array([
        [1.0, 0.0, 0.0],
        [0.0, np.cos(a), np.sin(a)],
        kinematics.global_rotation[:, 2],
    ])
    jac[:, :, 3:6] = np.cross(euler_axes[None, :, :], relative[:, None, :]).transpose(0, 2, 1)

    lever = relative[None, :, :] - relative[skeleton.dof_joint][:, None, :]
    dof_cols = np.cross(kinematics.dof_axes[:, None, :], lever) * skeleton.dof_subtree[:, :, None]
    jac[:, :, 6:] = dof_cols.transpose(1, 2, 0)
    return jac


def jacobian(skeleton: Skeleton, pose: HandPose) -> np.ndarray:
    """
    Analytic derivative of all joint positions w.r.t. the 26 pose parameters.

    Rows are joint-major (x, y, z of joint 0, then joint 1, ...); columns are
    t (3), R (3), theta (20).
    """
    _check_finite(pose.as_vector())
    kinematics = articulate(skeleton, pose.R, pose.theta)
    return jacobian_from_kinematics(skeleton, kinematics, pose.R).reshape(JOINT_COUNT * 3, PARAM_COUNT)


def bone_vectors(skeleton: Skeleton, points: np.ndarray) -> np.ndarray:
    """Child minus parent for every non-root joint, shape (..., 20, D)."""
    points = np.asarray(points, dtype=float)
    return points[..., 1:, :] - points[..., skeleton.parent[1:], :]


def calibrate_bone_lengths(
    predictions_2d: Sequence[np.ndarray],
    template: Skeleton,
    confidences: Optional[Sequence[np.ndarray]] = None,
) -> Skeleton:
    """
    Per-user skeleton adaptation from 2D detections of a hand held parallel to the image plane.

    Bone lengths measured in the image are divided by the wrist-to-middle-MCP
    length of the same frame, averaged over frames, and rescaled so the
    wrist-to-middle-MCP bone keeps the template's length.

    Args:
        predictions_2d: Sequence of (21, 2) detections, at least 30 frames.
        template (Skeleton): Skeleton to adapt.
        confidences: Optional sequence of (21,) weights; a bone is skipped in
            frames where either endpoint has zero confidence.

    Returns:
        Skeleton: Copy of the template with adapted bone lengths.

    Raises:
        InsufficientDataError: If fewer than 30 frames are given.
        DegenerateInputError: If a measured bone has zero length, or a bone
            is never measured.
    """
    detections = np.asarray(predictions_2d, dtype=float)
    if detections.ndim != 3 or detections.shape[1:] != (JOINT_COUNT, 2):
        raise InvalidInputError(f"expected (frames, {JOINT_COUNT}, 2) detections, got {detections.shape}")
    frames = detections.shape[0]
    if frames < MIN_CALIBRATION_FRAMES:
        raise InsufficientDataError(
            f"calibration needs at least {MIN_CALIBRATION_FRAMES} frames, got {frames}"
        )

    valid = np.ones((frames, JOINT_COUNT - 1), dtype=bool)
    if confidences is not None:
        visible = np.asarray(confidences, dtype=float) > 0
        valid = visible[:, 1:] & visible[:, template.parent[1:]]

    lengths = np.linalg.norm(bone_vectors(template, detections), axis=-1)
    degenerate = valid & (lengths < 1e-9)
    if np.any(degenerate):
        frame, bone = np.argwhere(degenerate)[0]
        raise DegenerateInputError(
            f"bone ending at '{template.names[bone + 1]}' has zero length in frame {frame}"
        )

    anchor = MIDDLE_MCP - 1
    valid &= valid[:, [anchor]]
    counts = valid.sum(axis=0)
    if np.any(counts == 0):
        bone = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateInputError(f"bone ending at '{template.names[bone + 1]}' is never measured")

    ratios = np.where(valid, lengths / np.where(valid, lengths[:, [anchor]], 1.0), 0.0)
    mean_ratio = ratios.sum(axis=0) / counts
    bone_length = np.concatenate([[0.0], mean_ratio * template.bone_length[MIDDLE_MCP]])
    logger.info(f"Calibrated bone lengths from {frames} frames (anchor {template.bone_length[MIDDLE_MCP]:.4f} m)")
    return template.with_bone_lengths(bone_length)
