import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanefusion.config import LaneModelConfig
from lanefusion.geometry import LaneFeature, Pose2
from lanefusion.lane_model import (
    LaneOffset,
    LaneTracker,
    NoFitError,
    TrackedLane,
    fit_base_clothoid,
    fit_lane_offsets,
    group_features,
    lanes_snapshot,
    normal_offsets,
    parallel_course,
    update_tracked_lanes,
)

COV = np.diag([0.01, 0.01, 1e-4])


def course_features(th0, c0, c1, offsets=(-1.75, 1.75), xs=np.arange(0.0, 121.0, 4.0), conf=1.0):
    """Exact features on parallel curves of a course through the origin."""
    out = []
    for off in offsets:
        for u in xs:
            dy = th0 + c0 * u + c1 * u * u / 2
            yc = u * (th0 + u * (c0 / 2 + u * c1 / 6))
            n = math.hypot(1.0, dy)
            out.append(LaneFeature.trusted(Pose2(u - off * dy / n, yc + off / n, math.atan(dy)), conf, COV))
    return out


def test_base_fit_exact_on_straight_road():
    b = fit_base_clothoid(course_features(0.0, 0.0, 0.0))
    assert b.params == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)
    assert len(b.outliers) == 0


@given(st.floats(-0.05, 0.05), st.floats(-1e-3, 1e-3), st.floats(-5e-6, 5e-6))
def test_base_fit_recovers_course(th0, c0, c1):
    b = fit_base_clothoid(course_features(th0, c0, c1, offsets=(0.0,)))
    assert b.theta0 == pytest.approx(th0, abs=1e-9)
    assert b.c0 == pytest.approx(c0, abs=1e-11)
    assert b.c1 == pytest.approx(c1, abs=1e-13)


def test_base_fit_flags_heading_outliers():
    feats = course_features(0.01, 5e-4, 0.0)
    bad = {3, 17, 40}
    feats = [LaneFeature.trusted(Pose2(f.pose.x, f.pose.y, f.pose.theta + 0.4), 1.0, COV) if k in bad else f
             for k, f in enumerate(feats)]
    b = fit_base_clothoid(feats)
    assert set(b.outliers.tolist()) == bad
    # off-course features carry the course heading of their foot point, a
    # few centimetres further along x, so the fit is close but not exact
    assert b.c0 == pytest.approx(5e-4, rel=1e-3)


def test_base_fit_refuses_poor_support():
    with pytest.raises(NoFitError):
        fit_base_clothoid(course_features(0, 0, 0)[:2])
    short = [f for f in course_features(0, 0, 0) if f.pose.x < 10]
    with pytest.raises(NoFitError):
        fit_base_clothoid(short)


def test_base_moved_matches_course_ahead():
    b = fit_base_clothoid(course_features(0.0, 1e-3, 1e-6, offsets=(0.0,)))
    m = b.moved(Pose2(10.0, 0.0, 0.0))
    assert m.c0 == pytest.approx(1e-3 + 1e-5)
    assert m.heading(0.0) == pytest.approx(b.heading(10.0))


@given(st.floats(-0.05, 0.05), st.floats(-1e-3, 1e-3), st.floats(-3.0, 3.0))
def test_normal_offsets_of_parallel_points(th0, c0, off):
    params = np.array([th0, c0, 0.0])
    u = np.linspace(0, 120, 25)
    dy = th0 + c0 * u
    yc = th0 * u + c0 * u * u / 2
    n = np.hypot(1.0, dy)
    d = normal_offsets(u - off * dy / n, yc + off / n, params)
    assert np.allclose(d, off, atol=1e-9)


@given(st.floats(-0.05, 0.05), st.floats(-1e-3, 1e-3), st.floats(-8.0, 8.0))
def test_parallel_course_stays_at_offset(th0, c0, off):
    p = parallel_course(np.array([th0, c0, 0.0]), off)
    x = np.linspace(0, 120, 50)
    y = p[0] + x * (p[1] + x * (p[2] / 2 + x * p[3] / 6))
    d = normal_offsets(x, y, np.array([th0, c0, 0.0]))
    assert np.allclose(d, off, atol=2e-3)


def test_parallel_course_zero_offset_is_course():
    assert parallel_course(np.array([0.01, 1e-3, 1e-6]), 0.0) == pytest.approx([0.0, 0.01, 1e-3, 1e-6])


def test_parallel_course_of_straight_road_is_a_shift():
    assert parallel_course(np.array([0.0, 0.0, 0.0]), 1.75) == pytest.approx([1.75, 0, 0, 0], abs=1e-12)


def test_grouping_and_offsets_on_three_lanes():
    offs = (-5.25, -1.75, 1.75, 5.25)
    feats = course_features(0.0, 5e-4, 0.0, offsets=offs)
    base = fit_base_clothoid(feats)
    grouping = group_features(feats, base, [], 3.5)
    assert len(grouping.groups) == 4
    assert len(grouping.ungrouped) == 0
    fitted = sorted(o.y0 for o in fit_lane_offsets(grouping, feats, base))
    assert fitted == pytest.approx(sorted(offs), abs=1e-4)


def test_grouping_prefers_previous_lanes():
    feats = course_features(0.0, 0.0, 0.0, offsets=(1.75,))
    base = fit_base_clothoid(feats)
    prev = [TrackedLane(9, np.array([1.6, 0, 0, 0]), np.eye(4))]
    grouping = group_features(feats, base, prev, 3.5)
    assert grouping.groups[0].lane_id == 9
    assert len(grouping.groups[0].members) == len(feats)


def test_grouping_ignores_weak_clusters():
    feats = course_features(0.0, 0.0, 0.0, offsets=(1.75,))
    feats += course_features(0.0, 0.0, 0.0, offsets=(6.0,), xs=np.array([5.0, 9.0]))
    base = fit_base_clothoid(feats)
    grouping = group_features(feats, base, [], 3.5, LaneModelConfig(min_support=3))
    assert len(grouping.groups) == 1
    assert len(grouping.ungrouped) == 2


def test_tracker_spawns_and_converges():
    tr = LaneTracker()
    feats = course_features(0.0, 1e-4, 0.0)
    base = fit_base_clothoid(feats)
    offsets = fit_lane_offsets(group_features(feats, base, [], 3.5), feats, base)
    tr.correct(base, offsets)
    assert len(tr.lanes) == 2
    assert [round(l.y0, 3) for l in tr.lanes] == [1.75, -1.75]
    for _ in range(5):
        tr.predict(0.1)
        grouping = group_features(feats, base, tr.lanes, 3.5)
        tr.correct(base, fit_lane_offsets(grouping, feats, base))
    assert [l.id for l in tr.lanes] == [0, 1] or [l.id for l in tr.lanes] == [1, 0]
    snap = tr.snapshot()
    assert snap[0].y(0.0) == pytest.approx(1.75, abs=1e-3)
    assert snap[0].c0 == pytest.approx(1e-4, rel=0.05)


def test_tracker_expires_unsupported_lanes():
    cfg = LaneModelConfig(expiry_frames=3)
    tr = LaneTracker(cfg)
    tr.lanes = [TrackedLane(0, np.array([1.75, 0, 0, 0]), np.eye(4) * 0.01)]
    for _ in range(3):
        tr.predict(0.1)
        tr.correct(None, [])
    assert tr.lanes == []


def test_tracker_predict_moves_lanes_with_ego():
    tr = LaneTracker()
    tr.lanes = [TrackedLane(0, np.array([1.75, 0.0, 1e-3, 0.0]), np.eye(4) * 1e-4)]
    tr.predict(0.1, Pose2(3.0, 0.1, 0.0))
    st = tr.lanes[0].state
    assert st[0] == pytest.approx(1.75 + 1e-3 * 9 / 2 - 0.1)
    assert st[1] == pytest.approx(3e-3)
    assert tr.lanes[0].covariance[0, 0] > 1e-4


def test_tracker_merges_close_lanes():
    tr = LaneTracker()
    tr.lanes = [TrackedLane(0, np.array([1.75, 0, 0, 0]), np.eye(4), age=5),
                TrackedLane(1, np.array([2.5, 0, 0, 0]), np.eye(4), age=1)]
    tr._merge()
    assert [l.id for l in tr.lanes] == [0]


def test_functional_update_leaves_input_untouched():
    lanes = [TrackedLane(0, np.array([1.75, 0, 0, 0]), np.eye(4))]
    feats = course_features(0.0, 0.0, 0.0, offsets=(1.8,))
    base = fit_base_clothoid(feats)
    out = update_tracked_lanes(lanes, base, [LaneOffset(0, 1.8, 30, 1e-4)], 0.1)
    assert lanes[0].y0 == 1.75
    assert out[0].y0 == pytest.approx(1.8, abs=0.01)
    assert lanes_snapshot(out)[0].x_max == 120.0
