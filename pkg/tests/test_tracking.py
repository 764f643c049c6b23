import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import exact_prediction, mild_pose
from kinefit.exceptions import InvalidTimestampError, SolverDivergedError
from kinefit.services import tracking
from kinefit.services.camera import project_points
from kinefit.services.energy import EnergyWeights, FramePrediction, renormalize_relative
from kinefit.services.hand_model import JOINT_COUNT, PARAM_COUNT, HandPose, forward_kinematics
from kinefit.services.smoothing import FilterConfig
from kinefit.services.solver import SolverConfig
from kinefit.services.tracking import (
    BoundingBox,
    HandTracker,
    TrackerState,
    TrackingConfig,
    track_sequence,
    update_bbox,
)

IMAGE = (640, 480)
NO_FILTER = FilterConfig(filter_2d=False, filter_3d=False)


def test_first_frame_bbox_is_centered_with_image_height():
    bbox = update_bbox(None, None, IMAGE)
    assert bbox == BoundingBox(center=(320.0, 240.0), side=480.0)


def test_bbox_follows_detections():
    detections = np.full((JOINT_COUNT, 2), 100.0)
    detections[0] = [75.0, 100.0]
    detections[1] = [125.0, 100.0]
    bbox = update_bbox(TrackerState(frame_index=3), detections, IMAGE)
    assert bbox.center == pytest.approx((100.0, 100.0))
    assert bbox.side == pytest.approx(110.0)


def test_bbox_side_has_a_floor():
    bbox = update_bbox(TrackerState(frame_index=1), np.full((JOINT_COUNT, 2), 200.0), IMAGE)
    assert bbox.side == 32.0
    assert bbox.center == (200.0, 200.0)


def test_bbox_is_clamped_to_the_image():
    detections = np.array([[-300.0, 10.0], [600.0, 470.0]] + [[300.0, 200.0]] * (JOINT_COUNT - 2))
    bbox = update_bbox(TrackerState(frame_index=1), detections, IMAGE)
    assert bbox.side == 480.0
    assert bbox.intersects(*IMAGE)


def test_bbox_resets_when_detections_leave_the_image():
    detections = np.full((JOINT_COUNT, 2), -500.0)
    assert update_bbox(TrackerState(frame_index=7), detections, IMAGE) == update_bbox(None, None, IMAGE)


def test_bbox_is_kept_without_detections():
    previous = BoundingBox(center=(50.0, 60.0), side=100.0)
    assert update_bbox(TrackerState(bbox=previous, frame_index=4), None, IMAGE) is previous


def test_bbox_padding_is_configurable():
    detections = np.array([[100.0, 100.0], [140.0, 100.0]] + [[120.0, 100.0]] * (JOINT_COUNT - 2))
    bbox = update_bbox(TrackerState(frame_index=1), detections, IMAGE, TrackingConfig(bbox_padding=3.0))
    assert bbox.side == pytest.approx(120.0)


def test_empty_stream_gives_no_frames(skeleton, cam):
    assert track_sequence(skeleton, cam, SolverConfig(), []) == []


def test_single_exact_frame_is_recovered(skeleton, cam, rng):
    truth = mild_pose(rng, skeleton)
    frames = track_sequence(skeleton, cam, SolverConfig.accuracy(), [(0.0, exact_prediction(skeleton, cam, truth))])
    assert len(frames) == 1
    error = np.linalg.norm(frames[0].joints_world - forward_kinematics(skeleton, truth), axis=1)
    assert error.mean() < 0.005
    assert not frames[0].degraded


def test_tracked_frames_are_consistent(skeleton, cam, rng):
    truth = mild_pose(rng, skeleton)
    pred = exact_prediction(skeleton, cam, truth)
    frames = track_sequence(skeleton, cam, SolverConfig(), [(k / 30.0, pred) for k in range(4)])
    assert [f.frame_index for f in frames] == [0, 1, 2, 3]
    assert frames[0].bbox == BoundingBox(center=(320.0, 240.0), side=480.0)
    for frame in frames:
        assert_allclose(frame.joints_2d, project_points(cam, frame.joints_world))
        assert frame.bbox.side > 0
        assert frame.bbox.intersects(cam.width, cam.height)


def test_identical_frames_converge(skeleton, cam, rng):
    pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
    frames = track_sequence(skeleton, cam, SolverConfig(), [(k / 30.0, pred) for k in range(11)])
    poses = np.array([f.pose.as_vector() for f in frames])
    deltas = np.linalg.norm(np.diff(poses, axis=0), axis=1)
    assert deltas[-1] <= max(0.1 * deltas[0], 1e-6)


def test_tracking_is_deterministic(skeleton, cam, rng):
    stream = []
    for k in range(5):
        pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
        stream.append((k / 30.0, pred))
    first = track_sequence(skeleton, cam, SolverConfig(), stream)
    second = track_sequence(skeleton, cam, SolverConfig(), stream)
    for a, b in zip(first, second):
        assert np.array_equal(a.pose.as_vector(), b.pose.as_vector())
        assert a.energy == b.energy


def test_velocity_is_carried_between_frames(skeleton, cam, rng):
    tracker = HandTracker(skeleton, cam, SolverConfig(), NO_FILTER)
    first = tracker.process(exact_prediction(skeleton, cam, mild_pose(rng, skeleton)), 0.0)
    assert not tracker.state.prev_velocity.any()
    second = tracker.process(exact_prediction(skeleton, cam, mild_pose(rng, skeleton)), 1 / 30.0)
    assert_allclose(tracker.state.prev_velocity, second.pose.as_vector() - first.pose.as_vector(), atol=1e-12)
    assert tracker.state.frame_index == 2


def test_timestamps_must_increase(skeleton, cam, rng):
    tracker = HandTracker(skeleton, cam)
    pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
    tracker.process(pred, 1.0)
    with pytest.raises(InvalidTimestampError):
        tracker.process(pred, 1.0)


def test_diverged_solve_degrades_the_frame(skeleton, cam, rng, monkeypatch):
    tracker = HandTracker(skeleton, cam, SolverConfig(), NO_FILTER)
    pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
    good = tracker.process(pred, 0.0)

    def diverge(*args, **kwargs):
        raise SolverDivergedError("energy became non-finite")

    monkeypatch.setattr(tracking, "solve_frame", diverge)
    degraded = tracker.process(pred, 1 / 30.0)
    assert degraded.degraded
    assert np.isnan(degraded.energy)
    assert np.array_equal(degraded.pose.as_vector(), good.pose.as_vector())
    assert not tracker.state.prev_velocity.any()
    assert tracker.state.frame_index == 2


@pytest.mark.parametrize("joint, onto", [(7, 6), (13, 0)], ids=["index_dip", "ring_mcp"])
def test_zero_length_predicted_bone_degrades_only_its_frame(skeleton, cam, rng, joint, onto):
    stream = []
    for k in range(3):
        pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
        if k == 1:
            x = pred.x.copy()
            x[joint] = x[onto]
            pred = FramePrediction(u=pred.u, omega=pred.omega, x=x)
        stream.append((k / 30.0, pred))

    frames = track_sequence(skeleton, cam, SolverConfig(), stream, NO_FILTER)
    assert len(frames) == 3
    assert [f.degraded for f in frames] == [False, True, False]
    assert np.isnan(frames[1].energy)
    assert frames[1].diagnostics is None
    assert np.array_equal(frames[1].pose.as_vector(), frames[0].pose.as_vector())
    assert np.isfinite(frames[2].energy)


def test_degenerate_first_frame_falls_back_to_the_neutral_hand(skeleton, cam, rng):
    pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
    x = pred.x.copy()
    x[7] = x[6]
    tracker = HandTracker(skeleton, cam, SolverConfig(), NO_FILTER)
    frame = tracker.process(FramePrediction(u=pred.u, omega=pred.omega, x=x), 0.0)
    assert frame.degraded
    assert np.array_equal(frame.pose.as_vector(), HandPose.neutral().as_vector())
    assert tracker.state.frame_index == 1


def test_reset_starts_a_new_stream(skeleton, cam, rng):
    tracker = HandTracker(skeleton, cam)
    pred = exact_prediction(skeleton, cam, mild_pose(rng, skeleton))
    tracker.process(pred, 5.0)
    tracker.reset()
    assert tracker.state.prev_pose is None
    assert tracker.process(pred, 0.0).frame_index == 0


@pytest.mark.slow
def test_temporal_term_reduces_jitter_on_a_static_hand(skeleton, cam):
    truth = HandPose(t=[0.01, 0.02, 0.47], R=[0.1, -0.1, 0.05], theta=0.2 * skeleton.theta_max)
    exact = exact_prediction(skeleton, cam, truth)
    noise = np.random.default_rng(7)
    stream = []
    for k in range(60):
        stream.append((k / 30.0, FramePrediction(
            u=exact.u + noise.normal(0.0, 3.0, size=(JOINT_COUNT, 2)),
            omega=exact.omega,
            x=renormalize_relative(exact.x + noise.normal(0.0, 0.02, size=(JOINT_COUNT, 3))),
        )))

    def jitter(wtemp):
        config = SolverConfig(weights=EnergyWeights(wtemp=wtemp))
        frames = track_sequence(skeleton, cam, config, stream)
        joints = np.array([f.joints_world for f in frames])
        return np.mean(np.linalg.norm(np.diff(joints, axis=0), axis=-1))

    assert jitter(0.1) < jitter(0.0)


def test_tracker_state_defaults():
    state = TrackerState()
    assert state.prev_pose is None
    assert state.prev_velocity.shape == (PARAM_COUNT,)
    assert state.frame_index == 0
