import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefusion.config import IngestConfig
from lanefusion.geometry import Clothoid, LaneFeature, Pose2
from lanefusion.ingest import (
    HrcFeatureReport,
    LaneWidthTracker,
    SmcLaneReport,
    TrackedObject,
    current_lane_width,
    eligible_objects,
    ingest_hrc_features,
    lane_width_estimate,
    object_to_features,
    sample_smc_features,
)


def smc(left=1.75, right=-1.75, c0=0.0, rng=20.0, **kw):
    l = None if left is None else Clothoid(left, 0.0, c0, 0.0, 0.0, 90.0)
    r = None if right is None else Clothoid(right, 0.0, c0, 0.0, 0.0, 90.0)
    return SmcLaneReport(l, r, rng, **kw)


def test_smc_sampling_straight_road():
    left, right = sample_smc_features(smc())
    assert len(left) == len(right) == 11
    assert [f.pose.x for f in left] == pytest.approx(np.arange(0, 21, 2))
    assert all(f.pose.y == pytest.approx(1.75) for f in left)
    assert all(f.pose.y == pytest.approx(-1.75) for f in right)
    assert all(f.pose.theta == 0.0 for f in left + right)
    assert all(f.confidence == 0.8 for f in left)


def test_smc_heading_is_angle_of_slope():
    left, _ = sample_smc_features(smc(c0=1e-3, rng=60.0))
    f = left[5]
    assert f.pose.x == 10.0
    assert f.pose.theta == pytest.approx(math.atan(1e-3 * 10.0))
    assert f.pose.y == pytest.approx(1.75 + 1e-3 * 50.0)


def test_smc_covariance_propagation():
    sig = (0.05, 0.002, 2e-5, 2e-7)
    left, _ = sample_smc_features(smc(rng=40.0, sigmas=sig), IngestConfig(smc_along_sigma=1.0))
    f = left[10]     # x = 20
    x = 20.0
    jy = np.array([1, x, x * x / 2, x**3 / 6])
    jt = np.array([0, 1, x, x * x / 2])
    p = np.square(sig)
    assert f.covariance[1, 1] == pytest.approx(jy**2 @ p)
    assert f.covariance[2, 2] == pytest.approx(jt**2 @ p)
    assert f.covariance[1, 2] == pytest.approx((jy * jt) @ p)
    assert f.covariance[0, 0] == pytest.approx(1.0)
    assert np.linalg.eigvalsh(f.covariance)[0] >= 0.0


def test_smc_missing_side_and_zero_range():
    left, right = sample_smc_features(smc(right=None))
    assert left and right == []
    left, right = sample_smc_features(smc(rng=0.0))
    assert left == [] and right == []


def test_smc_sampling_respects_validity_interval():
    c = Clothoid(1.75, 0.0, 0.0, 0.0, 0.0, 73.99999999999994)
    left, _ = sample_smc_features(SmcLaneReport(c, None, 90.0))
    assert max(f.pose.x for f in left) <= c.x_max


def test_smc_report_validation():
    with pytest.raises(ValueError):
        smc(rng=95.0)
    with pytest.raises(ValueError):
        smc(sigmas=(0.1, 0.1))


def test_hrc_ingest_clips_range_and_drops_bad_covariances():
    good = LaneFeature(Pose2(50, 1.7, 0), 0.6, np.diag([0.04, 0.04, 1e-4]))
    far = LaneFeature(Pose2(125, 1.7, 0), 0.6, np.diag([0.04, 0.04, 1e-4]))
    bad = LaneFeature.trusted(Pose2(60, 1.7, 0), 0.6, np.diag([0.04, 0.0, 1e-4]))
    out = ingest_hrc_features(HrcFeatureReport([good, far, bad], max_range=120.0))
    assert out.features == [good]
    assert out.clipped == 1 and out.dropped == 1
    with pytest.raises(ValueError):
        HrcFeatureReport([], max_range=140.0)


def test_lane_width_from_smc_and_fallback():
    w = lane_width_estimate(smc(1.8, -1.7))
    assert w.width == pytest.approx(3.5) and w.from_smc
    assert lane_width_estimate(None).width == 3.5
    assert not lane_width_estimate(smc(3.0, -3.0)).from_smc     # 6 m fails the gate
    assert not lane_width_estimate(smc(right=None)).from_smc
    assert current_lane_width(smc(1.6, -1.6)) == pytest.approx(3.2)


def test_width_tracker_default_then_filters():
    tr = LaneWidthTracker(smc_sigma=0.15, default_sigma=0.3)
    w = tr.update(None)
    assert w == (3.5, False, 0.3)
    w = tr.update(smc(1.8, -1.8), 0.0)
    assert w.from_smc and w.width == pytest.approx(3.6) and w.sigma == pytest.approx(0.15)
    w = tr.update(smc(1.7, -1.7), 3.0)
    assert 3.4 < w.width < 3.6
    assert w.sigma < 0.15


def test_width_tracker_variance_grows_without_measurements():
    cfg = IngestConfig(width_drift_sigma=0.05, width_sigma_floor=0.0)
    tr = LaneWidthTracker(cfg, smc_sigma=0.15)
    tr.update(smc())
    s0 = tr.update(None, 0.0).sigma
    s1 = tr.update(None, 100.0).sigma
    assert s1**2 == pytest.approx(s0**2 + 0.05**2)
    assert tr.update(None, 0.0).width == pytest.approx(3.5)


def test_width_tracker_sigma_floor():
    tr = LaneWidthTracker(IngestConfig(width_sigma_floor=0.05))
    for _ in range(500):
        w = tr.update(smc(), 0.0)
    assert w.sigma == pytest.approx(0.05)


@given(st.lists(st.floats(2.6, 4.4), min_size=1, max_size=30))
def test_width_tracker_stays_within_measured_range(widths):
    tr = LaneWidthTracker()
    for w in widths:
        out = tr.update(smc(w / 2, -w / 2), 3.0)
    assert min(widths) - 1e-9 <= out.width <= max(widths) + 1e-9


def _obj(x=30.0, y=0.0, th=0.0, confirmed=True):
    return TrackedObject(7, Pose2(x, y, th), 25.0, np.diag([0.09, 0.09, 1e-4]), confirmed)


def test_object_pseudo_features():
    left, right = object_to_features(_obj(), 3.5)
    assert (left.pose.x, left.pose.y) == pytest.approx((30.0, 1.75))
    assert (right.pose.x, right.pose.y) == pytest.approx((30.0, -1.75))
    assert left.confidence == 0.5
    # driver spread adds lateral variance
    assert left.covariance[1, 1] == pytest.approx(0.09 + 0.25**2)
    assert left.covariance[0, 0] == pytest.approx(0.09)


@given(st.floats(-0.2, 0.2), st.floats(2.5, 4.5))
def test_object_features_are_perpendicular_to_heading(th, w):
    left, right = object_to_features(_obj(th=th), w)
    d = np.array([left.pose.x - right.pose.x, left.pose.y - right.pose.y])
    assert np.linalg.norm(d) == pytest.approx(w)
    assert d @ np.array([math.cos(th), math.sin(th)]) == pytest.approx(0.0, abs=1e-9)


def test_object_filters():
    assert object_to_features(_obj(x=-5.0), 3.5) is None
    with pytest.raises(ValueError):
        object_to_features(_obj(), 6.0)
    objs = [_obj(), _obj(x=-3.0), _obj(confirmed=False)]
    assert eligible_objects(objs) == objs[:1]
