import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefusion.geometry import (
    Clothoid,
    ControlVector,
    InvalidCovarianceError,
    LaneFeature,
    OutOfRangeError,
    Pose2,
    between_arrays,
    compose_arrays,
    ctrv_motion,
    information_batch,
    information_from_covariance,
    normalize_angle,
    pose_between,
    pose_compose,
    pose_inverse,
    rotate_covariance,
    wrap_angles,
)

coord = st.floats(-200, 200, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def close(a: Pose2, b: Pose2, tol=1e-9):
    return (abs(a.x - b.x) < tol and abs(a.y - b.y) < tol
            and abs(normalize_angle(a.theta - b.theta)) < tol)


def test_normalize_angle_examples():
    assert normalize_angle(0.0) == 0.0
    assert normalize_angle(math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert normalize_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    with pytest.raises(ValueError):
        normalize_angle(float("nan"))


@given(angle)
def test_normalize_angle_range(a):
    r = normalize_angle(a)
    assert -math.pi < r <= math.pi
    assert math.isclose(math.sin(r), math.sin(a), abs_tol=1e-9)
    assert math.isclose(math.cos(r), math.cos(a), abs_tol=1e-9)


@given(st.lists(angle, min_size=1, max_size=20))
def test_wrap_angles_agrees_with_scalar(a):
    w = wrap_angles(np.array(a))
    for x, y in zip(a, w):
        assert math.isclose(math.sin(y), math.sin(x), abs_tol=1e-9)
        assert -math.pi - 1e-12 < y <= math.pi + 1e-12


def test_compose_example():
    a = Pose2(1, 2, math.pi / 2)
    b = Pose2(3, 0, 0)
    c = pose_compose(a, b)
    assert close(c, Pose2(1, 5, math.pi / 2))
    assert close(pose_between(a, c), b)


@given(poses, poses)
def test_between_inverts_compose(a, b):
    assert close(pose_between(a, pose_compose(a, b)), b, 1e-7)


@given(poses)
def test_inverse_composes_to_identity(a):
    assert close(pose_compose(a, pose_inverse(a)), Pose2(), 1e-7)


@given(poses, poses, poses)
def test_compose_is_associative(a, b, c):
    assert close(pose_compose(pose_compose(a, b), c), pose_compose(a, pose_compose(b, c)), 1e-6)


@given(poses, poses)
def test_array_forms_match_scalar_forms(a, b):
    ba = between_arrays(a.as_array(), b.as_array())[0]
    assert close(Pose2.from_array(ba), pose_between(a, b), 1e-7)
    ca = compose_arrays(a.as_array(), b.as_array())[0]
    assert close(Pose2.from_array(ca), pose_compose(a, b), 1e-7)


def test_rotate_covariance_quarter_turn():
    cov = np.diag([4.0, 1.0, 0.1])
    r = rotate_covariance(cov, math.pi / 2)
    assert np.allclose(r, np.diag([1.0, 4.0, 0.1]))


def test_lane_feature_validates_covariance():
    p = Pose2(1, 2, 0)
    LaneFeature(p, 0.5, np.eye(3))
    with pytest.raises(ValueError):
        LaneFeature(p, 1.5, np.eye(3))
    with pytest.raises(InvalidCovarianceError):
        LaneFeature(p, 0.5, np.eye(2))
    with pytest.raises(InvalidCovarianceError):
        LaneFeature(p, 0.5, np.array([[1.0, 2.0, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    with pytest.raises(InvalidCovarianceError):
        LaneFeature(p, 0.5, -np.eye(3))
    with pytest.raises(InvalidCovarianceError):
        LaneFeature(p, 0.5, np.full((3, 3), np.nan))


def test_lane_feature_covariance_is_read_only():
    f = LaneFeature(Pose2(), 1.0, np.eye(3))
    with pytest.raises(ValueError):
        f.covariance[0, 0] = 2.0


def test_information_rejects_singular_covariance():
    f = LaneFeature(Pose2(), 1.0, np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(InvalidCovarianceError):
        f.information()
    assert np.allclose(information_from_covariance(np.diag([4.0, 1.0, 0.25])), np.diag([0.25, 1.0, 4.0]))


def test_information_batch_flags_bad_rows():
    covs = np.stack([np.eye(3), np.diag([1.0, 0.0, 1.0]), np.diag([1.0, 1e-14, 1.0]),
                     np.full((3, 3), np.nan), 2 * np.eye(3)])
    info, ok = information_batch(covs)
    assert ok.tolist() == [True, False, False, False, True]
    assert np.allclose(info[0], np.eye(3))
    assert np.allclose(info[4], 0.5 * np.eye(3))
    assert np.all(info[1] == 0.0)
    empty, ok0 = information_batch(np.zeros((0, 3, 3)))
    assert empty.shape == (0, 3, 3) and ok0.shape == (0,)


def test_clothoid_evaluation():
    c = Clothoid(1.0, 0.01, 1e-3, 1e-5)
    x = 30.0
    assert c.y(x) == pytest.approx(1.0 + 0.3 + 1e-3 * 900 / 2 + 1e-5 * 27000 / 6)
    assert c.heading(x) == pytest.approx(0.01 + 0.03 + 1e-5 * 900 / 2)
    ys = c.y(np.array([0.0, 10.0]))
    assert ys.shape == (2,) and ys[0] == 1.0


@given(st.floats(-5, 5), st.floats(-0.2, 0.2), st.floats(-2e-3, 2e-3), st.floats(-1e-5, 1e-5),
       st.floats(1, 119))
def test_clothoid_heading_is_derivative(y0, th, c0, c1, x):
    c = Clothoid(y0, th, c0, c1)
    h = 1e-4
    num = (c.y(x + h) - c.y(x - h)) / (2 * h)
    assert c.heading(x) == pytest.approx(num, abs=1e-7)


def test_clothoid_range_and_bounds():
    c = Clothoid(x_max=50.0)
    with pytest.raises(OutOfRangeError):
        c.y(60.0)
    with pytest.raises(OutOfRangeError):
        c.heading(np.array([0.0, -1.0]))
    with pytest.raises(ValueError):
        Clothoid(theta0=math.radians(16))
    with pytest.raises(ValueError):
        Clothoid(x_min=10.0, x_max=10.0)


def test_ctrv_straight_and_turn():
    d = ctrv_motion(ControlVector(0.0, 30.0, 0.1))
    assert close(d, Pose2(3.0, 0.0, 0.0))
    w, v, dt = 0.2, 20.0, 0.5
    d = ctrv_motion(ControlVector(w, v, dt))
    r = v / w
    assert close(d, Pose2(r * math.sin(w * dt), r * (1 - math.cos(w * dt)), w * dt))
    with pytest.raises(ValueError):
        ControlVector(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        ControlVector(0.0, -1.0, 0.1)


@given(st.floats(-1e-2, 1e-2), st.floats(0, 40))
def test_ctrv_small_turn_follows_series(w, v):
    dt = 0.1
    d = ctrv_motion(ControlVector(w, v, dt))
    th, dist = w * dt, v * dt
    assert abs(d.x - dist * (1 - th * th / 6)) < dist * th**4 + 1e-6
    assert abs(d.y - dist * th / 2) < dist * abs(th) ** 3 + 1e-6
    assert d.theta == pytest.approx(th, abs=1e-15)
