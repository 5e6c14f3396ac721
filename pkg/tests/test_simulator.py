import math

import numpy as np
import pytest

from lanefusion.io import load_bundled
from lanefusion.simulator import (
    Dropout,
    LaneChange,
    ObjectSpec,
    Road,
    RoadSegment,
    ScenarioConfig,
    ScenarioError,
    boundary_offsets,
    generate,
    ground_truth_local,
    lane_center,
    object_lane_change_windows,
    to_global,
    to_local,
)
from lanefusion.geometry import Pose2


def quiet(cfg: ScenarioConfig) -> ScenarioConfig:
    s = cfg.sensors
    cfg.ego.wander_sigma = 0.0
    s.smc.sigmas = (0.0, 0.0, 0.0, 0.0)
    s.hrc.sigma0 = s.hrc.sigma_slope = s.hrc.sigma_theta = 0.0
    s.hrc.detection_prob, s.hrc.outlier_rate = 1.0, 0.0
    s.objects.sigma_pos = s.objects.sigma_theta = s.objects.driver_sigma = 0.0
    s.odometry.speed_sigma = s.odometry.yaw_rate_sigma = 0.0
    return cfg


def test_road_geometry_of_an_arc():
    road = Road([RoadSegment(500.0, 1e-3)])
    s = 300.0
    p, th = road.point(s)
    r = 1000.0
    assert th == pytest.approx(0.3)
    assert p == pytest.approx([r * math.sin(0.3), r * (1 - math.cos(0.3))], abs=1e-3)
    p2, _ = road.point(s, 2.0)
    assert np.hypot(*(p2 - p)) == pytest.approx(2.0)


def test_road_spiral_curvature_is_linear():
    road = Road([RoadSegment(100.0), RoadSegment(150.0, 0.0, 1e-3 / 150.0), RoadSegment(300.0, 1e-3)])
    assert road.curvature(50.0) == 0.0
    assert road.curvature(175.0) == pytest.approx(0.5e-3)
    assert road.curvature(400.0) == pytest.approx(1e-3)
    assert road.heading(250.0) == pytest.approx(1e-3 * 150.0 / 2)


def test_lane_layout():
    assert boundary_offsets(3, 3.5).tolist() == [-5.25, -1.75, 1.75, 5.25]
    assert lane_center(1, 3, 3.5) == 0.0
    assert lane_center(0, 3, 3.5) == -3.5


def test_local_global_round_trip():
    pose = Pose2(10.0, -4.0, 0.7)
    pts = np.array([[1.0, 2.0], [-3.0, 5.0]])
    assert np.allclose(to_local(to_global(pts, pose), pose), pts)


def test_validation_errors():
    bad = [
        ScenarioConfig(lane_count=0),
        ScenarioConfig(duration=0.0),
        ScenarioConfig(road=[]),
        ScenarioConfig(dropouts=[Dropout(9, 0, 10)]),
        ScenarioConfig(dropouts=[Dropout(1, 10, 0)]),
    ]
    c = ScenarioConfig()
    c.ego.lane = 5
    bad.append(c)
    c = ScenarioConfig()
    c.traffic.objects = [ObjectSpec(1, 0, 20, 30), ObjectSpec(1, 1, 40, 30)]
    bad.append(c)
    c = ScenarioConfig()
    c.traffic.objects = [ObjectSpec(1, 0, 20, 30)]
    c.traffic.lane_changes = [LaneChange(1, 5.0, 1, 2)]
    bad.append(c)
    c = ScenarioConfig()
    c.sensors.hrc.sigma0 = -1.0
    bad.append(c)
    for cfg in bad:
        with pytest.raises(ScenarioError):
            cfg.validate()


def test_generation_is_deterministic():
    cfg = ScenarioConfig(duration=2.0, seed=4)
    cfg.traffic.count = 2
    t1, f1 = generate(cfg)
    t2, f2 = generate(cfg)
    assert np.array_equal(t1.ego_poses, t2.ego_poses)
    for a, b in zip(f1, f2):
        assert a.control == b.control
        assert [q.pose for q in a.hrc.features] == [q.pose for q in b.hrc.features]
        assert [o.pose for o in a.objects] == [o.pose for o in b.objects]
    _, f3 = generate(ScenarioConfig(duration=2.0, seed=5))
    assert [q.pose for q in f1[5].hrc.features] != [q.pose for q in f3[5].hrc.features]


def test_frame_count_and_timestamps():
    truth, frames = generate(ScenarioConfig(duration=2.0, frame_rate=10.0))
    assert len(frames) == 21 == len(truth.ego_poses)
    assert [f.index for f in frames] == list(range(21))
    assert frames[-1].timestamp == pytest.approx(2.0)


def test_zero_noise_sensors_lie_on_true_boundaries():
    cfg = quiet(ScenarioConfig(duration=1.0, road=[RoadSegment(200.0), RoadSegment(3000.0, 1e-3)]))
    cfg.ego.start = 150.0
    cfg.traffic.objects = [ObjectSpec(1, 2, 40.0, 30.0)]
    truth, frames = generate(cfg)
    f = frames[5]
    local = ground_truth_local(truth, truth.ego_pose(5))

    def dist_to_truth(x, y):
        return min(abs(float(np.interp(x, b[:, 0], b[:, 1])) - y) for b in local)

    for q in f.hrc.features:
        assert dist_to_truth(q.pose.x, q.pose.y) < 0.01
    for c in (f.smc.left, f.smc.right):
        for x in (0.0, 30.0, 60.0):
            assert dist_to_truth(x, c.y(x)) < 0.02
    (o,) = f.objects
    centre = lane_center(2, cfg.lane_count, cfg.lane_width)
    assert abs(dist_to_truth(o.pose.x, o.pose.y) - (centre - 1.75)) < 0.02


def test_hrc_respects_range():
    cfg = ScenarioConfig(duration=1.0)
    cfg.sensors.hrc.range = 80.0
    _, frames = generate(cfg)
    for f in frames:
        assert all(q.pose.x <= 80.0 + 1e-9 for q in f.hrc.features)
        assert all(q.pose.x >= cfg.sensors.hrc.min_range - 1e-9 for q in f.hrc.features)


def test_disabled_sensors():
    cfg = ScenarioConfig(duration=1.0)
    cfg.sensors.smc.range = 0.0
    _, frames = generate(cfg)
    assert all(f.smc is None for f in frames)


def test_dropout_removes_boundary_features():
    cfg = quiet(ScenarioConfig(duration=2.0, lane_count=3))
    cfg.dropouts = [Dropout(2, 0.0, 5000.0)]
    truth, frames = generate(cfg)
    f = frames[10]
    local = ground_truth_local(truth, truth.ego_pose(10))
    b2 = local[2]
    for q in f.hrc.features:
        assert abs(float(np.interp(q.pose.x, b2[:, 0], b2[:, 1])) - q.pose.y) > 0.5
    assert f.smc.left is None and f.smc.right is not None


def test_lane_change_moves_object():
    cfg = quiet(ScenarioConfig(duration=8.0))
    cfg.traffic.objects = [ObjectSpec(1, 1, 40.0, 30.0)]
    cfg.traffic.lane_changes = [LaneChange(1, 2.0, 1, 2, 3.0)]
    _, frames = generate(cfg)
    before = frames[10].objects[0].pose.y
    after = frames[70].objects[0].pose.y
    assert before == pytest.approx(0.0, abs=0.05)
    assert after == pytest.approx(3.5, abs=0.05)
    assert object_lane_change_windows(cfg) == {1: [(2.0, 5.0)]}


def test_ground_truth_window_matches_full():
    truth, _ = generate(ScenarioConfig(duration=1.0))
    pose = truth.ego_pose(5)
    full = ground_truth_local(truth, pose)
    win = ground_truth_local(truth, pose, window=(20.0, 160.0), ego_arc=float(truth.ego_arc[5]))
    for a, b in zip(full, win):
        x = b[:, 0]
        assert x.min() < -15 and x.max() > 150
        ya = np.interp(50.0, a[:, 0], a[:, 1])
        yb = np.interp(50.0, b[:, 0], b[:, 1])
        assert ya == pytest.approx(yb)


def test_bundled_reference_drives_two_kilometres():
    cfg = load_bundled("reference")
    assert cfg.lane_count == 3
    assert cfg.ego.speed * cfg.duration >= 2000.0
    assert cfg.traffic.count + len(cfg.traffic.objects) == 5
