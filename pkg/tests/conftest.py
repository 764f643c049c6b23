import numpy as np
import pytest

from kinefit.services.camera import CameraIntrinsics, project_points
from kinefit.services.energy import FramePrediction, renormalize_relative
from kinefit.services.hand_model import ROOT, HandPose, forward_kinematics, load_default_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return load_default_skeleton()


@pytest.fixture
def cam():
    return CameraIntrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def central_difference(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def random_pose(rng, skeleton, spread=1.0, depth=0.45):
    """Pose in front of the camera with angles drawn inside (a shrunk copy of) the joint limits."""
    mid = 0.5 * (skeleton.theta_min + skeleton.theta_max)
    half = 0.5 * (skeleton.theta_max - skeleton.theta_min) * spread
    return HandPose(
        t=np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), depth + rng.uniform(-0.05, 0.05)]),
        R=rng.uniform(-0.6, 0.6, size=3) * spread,
        theta=rng.uniform(mid - half, mid + half),
    )


def exact_prediction(skeleton, cam, pose):
    joints = forward_kinematics(skeleton, pose)
    return FramePrediction(
        u=project_points(cam, joints),
        omega=np.ones(len(joints)),
        x=renormalize_relative(joints - joints[ROOT]),
    )


@pytest.fixture
def fd_gradient():
    return central_difference


@pytest.fixture
def make_pose(skeleton):
    def make(rng, spread=1.0, depth=0.45):
        return random_pose(rng, skeleton, spread, depth)
    return make


@pytest.fixture
def make_prediction(skeleton, cam):
    def make(pose):
        return exact_prediction(skeleton, cam, pose)
    return make


def mild_pose(rng, skeleton, depth=0.47):
    """Pose a few degrees from the open hand, as between consecutive video frames."""
    return HandPose(
        t=np.array([rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04), depth + rng.uniform(-0.03, 0.03)]),
        R=rng.uniform(-0.3, 0.3, size=3),
        theta=0.3 * rng.uniform(skeleton.theta_min, skeleton.theta_max),
    )
