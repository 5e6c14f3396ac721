import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lanefusion.geometry import Pose2
from lanefusion.graph import EdgeKind, FusionGraph

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def between(a, b):
    """b seen from a, written out independently of the package."""
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    d = b[2] - a[2]
    return np.array([c * dx + s * dy, -s * dx + c * dy, math.atan2(math.sin(d), math.cos(d))])


def wrap(a):
    return math.atan2(math.sin(a), math.cos(a))


def random_info(rng, kind):
    if kind == EdgeKind.WIDTH:
        return np.diag([0.0, 1.0 / rng.uniform(0.1, 0.4) ** 2, 1.0 / rng.uniform(0.01, 0.05) ** 2])
    if kind == EdgeKind.SMOOTHING:
        return np.diag([0.0, 1.0 / rng.uniform(0.05, 0.3) ** 2, 1.0 / rng.uniform(0.01, 0.05) ** 2])
    a = rng.normal(size=(3, 3)) * 0.3
    cov = a @ a.T + np.diag(rng.uniform(0.01, 0.2, 3) ** 2)
    d = np.diag([1.0, 1.0, 0.1])
    cov = d @ cov @ d
    return np.linalg.inv(cov)


def small_graph(rng):
    """Random graph with every edge kind and ten free scalars.

    Two ego poses (the later one holds the gauge), two features linked by a
    width and a switchable smoothing edge.
    """
    g = FusionGraph()
    true = {
        "p0": np.array([-rng.uniform(2, 4), rng.normal(0, 0.2), rng.normal(0, 0.02)]),
        "a": np.array([rng.uniform(5, 20), rng.uniform(1.5, 2.0), rng.normal(0, 0.02)]),
    }
    true["b"] = true["a"] + np.array([rng.uniform(1, 3), -rng.uniform(3.2, 3.8), rng.normal(0, 0.01)])
    p0 = g.add_pose(Pose2.from_array(true["p0"] + rng.normal(0, [0.1, 0.1, 0.01])))
    p1 = g.add_pose(Pose2())
    a = g.add_feature(Pose2.from_array(true["a"] + rng.normal(0, [0.2, 0.2, 0.01])))
    b = g.add_feature(Pose2.from_array(true["b"] + rng.normal(0, [0.2, 0.2, 0.01])))
    pos = {p0: true["p0"], p1: np.zeros(3), a: true["a"], b: true["b"]}

    def z(i, j, sigma):
        return between(pos[i], pos[j]) + rng.normal(0, sigma, 3)

    for kind, i, j in ((EdgeKind.ODOMETRY, p0, p1), (EdgeKind.SMC, p1, a), (EdgeKind.HRC, p0, b),
                       (EdgeKind.OBJ, p1, a), (EdgeKind.OBJ, p0, b), (EdgeKind.WIDTH, b, a)):
        zz = z(i, j, [0.1, 0.1, 0.01])
        if kind == EdgeKind.WIDTH:
            zz[0] = 0.0
        g.add_edge(kind, i, j, zz, random_info(rng, kind))
    k = g.add_switch(rng.uniform(0.5, 5.0), value=rng.uniform(0.3, 1.0))
    g.add_edge(EdgeKind.SMOOTHING, a, b, np.zeros(3), random_info(rng, EdgeKind.SMOOTHING), switch_id=k)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
