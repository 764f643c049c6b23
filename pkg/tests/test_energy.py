from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import central_difference, exact_prediction, random_pose
from kinefit.exceptions import DegeneratePredictionError, InvalidInputError
from kinefit.services.energy import (
    EnergyWeights,
    FrameEnergy,
    FramePrediction,
    RelativeTargets,
    e2d,
    e3d,
    elimits,
    etemp,
    normalize_targets,
    pose_velocity,
    renormalize_relative,
    total_energy,
)
from kinefit.services.hand_model import (
    DOF_COUNT,
    JOINT_COUNT,
    MIDDLE_MCP,
    PARAM_COUNT,
    ROOT,
    HandPose,
    forward_kinematics_relative,
)


def _noisy_prediction(skeleton, cam, pose, rng):
    exact = exact_prediction(skeleton, cam, pose)
    return FramePrediction(
        u=exact.u + rng.normal(0.0, 5.0, size=(JOINT_COUNT, 2)),
        omega=rng.uniform(0.2, 1.0, size=JOINT_COUNT),
        x=renormalize_relative(exact.x + rng.normal(0.0, 0.05, size=(JOINT_COUNT, 3))),
    )


def _check_gradient(value_and_gradient, vector, h=1e-6):
    analytic = value_and_gradient(vector).gradient
    numeric = central_difference(lambda v: value_and_gradient(v).value, vector, h=h)
    scale = max(np.abs(numeric).max(), 1e-12)
    assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-4 * scale)


def test_renormalize_relative_moves_middle_mcp_to_origin(rng):
    x = rng.normal(size=(JOINT_COUNT, 3))
    normalized = renormalize_relative(2.0 * x)
    assert_allclose(normalized[MIDDLE_MCP], 0.0, atol=1e-15)
    assert np.linalg.norm(normalized[ROOT]) == pytest.approx(1.0)
    assert_allclose(normalized, renormalize_relative(x), atol=1e-12)


def test_prediction_rejects_negative_confidence(skeleton, cam):
    exact = exact_prediction(skeleton, cam, HandPose.neutral())
    with pytest.raises(InvalidInputError):
        FramePrediction(u=exact.u, omega=-exact.omega, x=exact.x)
    with pytest.raises(InvalidInputError):
        FramePrediction(u=exact.u[:20], omega=exact.omega, x=exact.x)


def test_normalize_targets_is_identity_for_consistent_lengths(skeleton, rng):
    pose = random_pose(rng, skeleton)
    relative = forward_kinematics_relative(skeleton, pose)
    pred = FramePrediction(u=np.zeros((JOINT_COUNT, 2)), omega=np.ones(JOINT_COUNT), x=relative + 3.0)
    targets = normalize_targets(skeleton, pred)
    assert_allclose(targets.z, relative, atol=1e-12)


def test_normalize_targets_removes_prediction_scale(skeleton, rng):
    pose = random_pose(rng, skeleton)
    relative = forward_kinematics_relative(skeleton, pose)
    pred = FramePrediction(u=np.zeros((JOINT_COUNT, 2)), omega=np.ones(JOINT_COUNT), x=2.0 * relative)
    targets = normalize_targets(skeleton, pred)
    assert_allclose(targets.z, relative, atol=1e-12)
    assert not targets.z[ROOT].any()
    lengths = np.linalg.norm(targets.z[1:] - targets.z[skeleton.parent[1:]], axis=1)
    assert_allclose(lengths, skeleton.bone_length[1:], atol=1e-9)


def test_normalize_targets_names_zero_length_bone(skeleton, cam):
    exact = exact_prediction(skeleton, cam, HandPose.neutral())
    x = exact.x.copy()
    x[6] = x[5]
    with pytest.raises(DegeneratePredictionError, match="index_pip"):
        normalize_targets(skeleton, FramePrediction(u=exact.u, omega=exact.omega, x=x))


def test_e2d_vanishes_at_perfect_fit(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    result = e2d(skeleton, pose, exact_prediction(skeleton, cam, pose), cam)
    assert result.value == pytest.approx(0.0, abs=1e-18)
    assert_allclose(result.gradient, 0.0, atol=1e-9)


def test_e2d_single_joint_offset(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    exact = exact_prediction(skeleton, cam, pose)
    u = exact.u.copy()
    u[8] += [2.0, 0.0]
    omega = np.zeros(JOINT_COUNT)
    omega[8] = 1.0
    result = e2d(skeleton, pose, FramePrediction(u=u, omega=omega, x=exact.x), cam)
    assert result.value == pytest.approx(4.0)


def test_e2d_is_linear_in_confidence(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    pred = _noisy_prediction(skeleton, cam, pose, rng)
    doubled = FramePrediction(u=pred.u, omega=2.0 * pred.omega, x=pred.x)
    base = e2d(skeleton, pose, pred, cam)
    twice = e2d(skeleton, pose, doubled, cam)
    assert twice.value == pytest.approx(2.0 * base.value)
    assert_allclose(twice.gradient, 2.0 * base.gradient, rtol=1e-12)


def test_e2d_gradient_matches_finite_differences(skeleton, cam, rng):
    for _ in range(10):
        pose = random_pose(rng, skeleton)
        pred = _noisy_prediction(skeleton, cam, pose, rng)
        _check_gradient(lambda v: e2d(skeleton, HandPose.from_vector(v), pred, cam), pose.as_vector())


def test_e2d_pushes_joints_out_from_behind_the_camera(skeleton, cam):
    pose = HandPose(t=[0.0, 0.0, -0.05], R=np.zeros(3), theta=np.zeros(DOF_COUNT))
    pred = exact_prediction(skeleton, cam, HandPose.neutral())
    result = e2d(skeleton, pose, pred, cam)
    assert result.value >= 1e6
    # Moving the hand away from the camera lowers the energy
    assert result.gradient[2] < 0


def test_e3d_vanishes_for_targets_of_the_same_pose(skeleton, rng):
    pose = random_pose(rng, skeleton)
    targets = RelativeTargets(z=forward_kinematics_relative(skeleton, pose))
    result = e3d(skeleton, pose, targets)
    assert result.value == 0.0
    assert not result.gradient.any()


def test_e3d_is_exactly_translation_invariant(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    targets = normalize_targets(skeleton, _noisy_prediction(skeleton, cam, pose, rng))
    shifted = HandPose(t=pose.t + rng.normal(size=3), R=pose.R, theta=pose.theta)
    base = e3d(skeleton, pose, targets)
    moved = e3d(skeleton, shifted, targets)
    assert base.value == moved.value
    assert np.array_equal(base.gradient, moved.gradient)
    assert not base.gradient[0:3].any()


def test_e3d_gradient_matches_finite_differences(skeleton, cam, rng):
    for _ in range(10):
        pose = random_pose(rng, skeleton)
        targets = normalize_targets(skeleton, _noisy_prediction(skeleton, cam, random_pose(rng, skeleton), rng))
        _check_gradient(lambda v: e3d(skeleton, HandPose.from_vector(v), targets), pose.as_vector())


def test_elimits_inside_limits_is_zero(skeleton, rng):
    for _ in range(20):
        theta = rng.uniform(skeleton.theta_min, skeleton.theta_max)
        result = elimits(skeleton, HandPose(t=np.zeros(3), R=np.zeros(3), theta=theta))
        assert result.value == 0.0
        assert not result.gradient.any()


@pytest.mark.parametrize("index,delta,expected", [(5, 0.1, 0.01), (10, -0.2, 0.04)])
def test_elimits_is_one_sided_quadratic(skeleton, index, delta, expected):
    theta = 0.5 * (skeleton.theta_min + skeleton.theta_max)
    if delta > 0:
        theta[index] = skeleton.theta_max[index] + delta
    else:
        theta[index] = skeleton.theta_min[index] + delta
    result = elimits(skeleton, HandPose(t=np.zeros(3), R=np.zeros(3), theta=theta))
    assert result.value == pytest.approx(expected)
    gradient = np.zeros(PARAM_COUNT)
    gradient[6 + index] = 2.0 * delta
    assert_allclose(result.gradient, gradient, atol=1e-12)


def test_elimits_gradient_is_zero_at_the_limit(skeleton):
    theta = skeleton.theta_max.copy()
    result = elimits(skeleton, HandPose(t=np.zeros(3), R=np.zeros(3), theta=theta))
    assert result.value == 0.0
    assert not result.gradient.any()


def test_etemp_vanishes_for_constant_velocity(skeleton, rng):
    prev = random_pose(rng, skeleton)
    velocity = rng.normal(0.0, 0.01, size=PARAM_COUNT)
    pose = HandPose.from_vector(prev.as_vector() + velocity)
    assert etemp(pose, prev, velocity).value == pytest.approx(0.0, abs=1e-24)


def test_etemp_vanishes_at_rest(skeleton, rng):
    pose = random_pose(rng, skeleton)
    assert etemp(pose, pose, np.zeros(PARAM_COUNT)).value == 0.0


def test_etemp_is_squared_deviation_from_constant_velocity(skeleton, rng):
    prev = random_pose(rng, skeleton)
    velocity = rng.normal(0.0, 0.01, size=PARAM_COUNT)
    v = rng.normal(0.0, 0.01, size=PARAM_COUNT)
    pose = HandPose.from_vector(prev.as_vector() + velocity + v)
    result = etemp(pose, prev, velocity)
    assert result.value == pytest.approx(float(v @ v), rel=1e-9)
    assert_allclose(result.gradient, 2.0 * v, atol=1e-12)


def test_pose_velocity_wraps_rotation():
    prev = np.zeros(PARAM_COUNT)
    prev[3] = np.pi - 0.1
    pose = np.zeros(PARAM_COUNT)
    pose[3] = -np.pi + 0.1
    assert pose_velocity(pose, prev)[3] == pytest.approx(0.2)


def test_total_energy_selects_terms_by_weight(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    pred = _noisy_prediction(skeleton, cam, pose, rng)
    targets = normalize_targets(skeleton, pred)
    weights = EnergyWeights(w2d=1.0, w3d=0.0, wlimits=0.0, wtemp=0.0)
    total = total_energy(skeleton, pose, pred, targets, cam, weights)
    only_2d = e2d(skeleton, pose, pred, cam)
    assert total.value == pytest.approx(only_2d.value, rel=1e-12)
    assert_allclose(total.gradient, only_2d.gradient, rtol=1e-12)


def test_total_energy_vanishes_at_perfect_fit_with_matched_velocity(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    pred = exact_prediction(skeleton, cam, pose)
    targets = RelativeTargets(z=forward_kinematics_relative(skeleton, pose))
    velocity = np.full(PARAM_COUNT, 0.01)
    state = SimpleNamespace(prev_pose=HandPose.from_vector(pose.as_vector() - velocity), prev_velocity=velocity)
    result = total_energy(skeleton, pose, pred, targets, cam, EnergyWeights(), state)
    assert result.value == pytest.approx(0.0, abs=1e-12)


def test_total_gradient_is_weighted_sum_of_terms(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    pred = _noisy_prediction(skeleton, cam, pose, rng)
    targets = normalize_targets(skeleton, pred)
    prev = random_pose(rng, skeleton)
    velocity = rng.normal(0.0, 0.01, size=PARAM_COUNT)
    weights = EnergyWeights(w2d=3e-4, w3d=2.0, wlimits=5.0, wtemp=0.5)
    theta = pose.theta.copy()
    theta[0] = skeleton.theta_max[0] + 0.3
    pose = HandPose(t=pose.t, R=pose.R, theta=theta)

    total = total_energy(
        skeleton, pose, pred, targets, cam, weights, SimpleNamespace(prev_pose=prev, prev_velocity=velocity)
    )
    terms = {
        "e2d": e2d(skeleton, pose, pred, cam),
        "e3d": e3d(skeleton, pose, targets),
        "elimits": elimits(skeleton, pose),
        "etemp": etemp(pose, prev, velocity),
    }
    expected = (
        weights.w2d * terms["e2d"].gradient
        + weights.w3d * terms["e3d"].gradient
        + weights.wlimits * terms["elimits"].gradient
        + weights.wtemp * terms["etemp"].gradient
    )
    assert_allclose(total.gradient, expected, rtol=1e-12, atol=1e-12)
    assert set(total.terms) == set(terms)
    for name, term in terms.items():
        assert total.terms[name] == pytest.approx(term.value, rel=1e-12)


def test_temporal_term_is_inactive_without_previous_pose(skeleton, cam, rng):
    pose = random_pose(rng, skeleton)
    pred = _noisy_prediction(skeleton, cam, pose, rng)
    targets = normalize_targets(skeleton, pred)
    result = total_energy(skeleton, pose, pred, targets, cam, EnergyWeights())
    assert "etemp" not in result.terms


def test_total_gradient_matches_finite_differences(skeleton, cam, rng):
    for _ in range(100):
        pose = random_pose(rng, skeleton)
        pred = _noisy_prediction(skeleton, cam, random_pose(rng, skeleton, spread=0.5), rng)
        targets = normalize_targets(skeleton, pred)
        weights = EnergyWeights(
            w2d=rng.uniform(1e-5, 1e-3), w3d=rng.uniform(0.1, 2.0), wlimits=rng.uniform(1.0, 20.0), wtemp=rng.uniform(0.0, 1.0)
        )
        state = SimpleNamespace(prev_pose=random_pose(rng, skeleton), prev_velocity=rng.normal(0.0, 0.01, PARAM_COUNT))
        _check_gradient(
            lambda v: total_energy(skeleton, HandPose.from_vector(v), pred, targets, cam, weights, state),
            pose.as_vector(),
        )


def test_normal_matrix_is_the_hessian_at_a_perfect_fit(skeleton, cam, rng):
    pose = random_pose(rng, skeleton, spread=0.5)
    pred = exact_prediction(skeleton, cam, pose)
    energy = FrameEnergy(
        skeleton,
        cam,
        EnergyWeights(w2d=1e-4, w3d=1.0, wlimits=0.0, wtemp=0.1),
        pred=pred,
        targets=normalize_targets(skeleton, pred),
        prev_pose=pose,
        prev_velocity=np.zeros(PARAM_COUNT),
    )
    vector = pose.as_vector()
    normal = energy.evaluate(vector, order=2).normal
    assert normal.shape == (PARAM_COUNT, PARAM_COUNT)
    assert_allclose(normal, normal.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(normal) > 0)

    h = 1e-6
    numeric = np.zeros((PARAM_COUNT, PARAM_COUNT))
    for i in range(PARAM_COUNT):
        step = np.zeros(PARAM_COUNT)
        step[i] = h
        numeric[:, i] = (energy.evaluate(vector + step).gradient - energy.evaluate(vector - step).gradient) / (2 * h)
    assert_allclose(normal, numeric, rtol=1e-4, atol=1e-5 * np.abs(numeric).max())
