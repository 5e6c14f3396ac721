"""Planar poses, the generic lane-feature record and the cubic clothoid.

Everything here is an immutable value type. Poses use the vehicle
convention: x forward, y to the left, heading counter-clockwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
MAX_CLOTHOID_HEADING = math.radians(15.0)
MAX_COVARIANCE_CONDITION = 1e12


class OutOfRangeError(ValueError):
    """Clothoid evaluated outside its validity interval."""


class InvalidCovarianceError(ValueError):
    """Covariance that cannot be turned into an information matrix."""


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    r = math.remainder(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(a):
    """Vectorised :func:`normalize_angle` for numpy arrays."""
    a = np.asarray(a, dtype=float)
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    """a ⊕ b: pose b (given in frame a) expressed in the frame a lives in."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def pose_inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def pose_between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose a⁻¹ ⊕ b, i.e. b seen from a."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def between_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise pose_between for (n, 3) arrays; angles wrapped."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, wrap_angles(b[:, 2] - a[:, 2])])


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise pose_compose for (n, 3) arrays (either side may be a single row)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    return np.column_stack([
        a[:, 0] + c * b[:, 0] - s * b[:, 1],
        a[:, 1] + s * b[:, 0] + c * b[:, 1],
        wrap_angles(a[:, 2] + b[:, 2]),
    ])


def rotate_covariance(cov: np.ndarray, theta: float) -> np.ndarray:
    """Rotate the position block of a 3x3 (x, y, theta) covariance by theta."""
    c, s = math.cos(theta), math.sin(theta)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = r @ cov @ r.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class LaneFeature:
    """One lane feature: pose, confidence in [0, 1] and (x, y, theta) covariance."""

    pose: Pose2
    confidence: float
    covariance: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise InvalidCovarianceError(f"covariance must be 3x3, got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise InvalidCovarianceError("covariance has non-finite entries")
        scale = max(1.0, float(np.abs(cov).max()))
        if float(np.abs(cov - cov.T).max()) > 1e-9 * scale:
            raise InvalidCovarianceError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov + 1e-12 * scale * np.eye(3))
        except np.linalg.LinAlgError:
            raise InvalidCovarianceError("covariance is not positive semi-definite") from None
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def trusted(cls, pose: "Pose2", confidence: float, covariance: np.ndarray) -> "LaneFeature":
        """Build without validation; for covariances constructed symmetric PSD by the caller."""
        f = object.__new__(cls)
        object.__setattr__(f, "pose", pose)
        object.__setattr__(f, "confidence", float(confidence))
        object.__setattr__(f, "covariance", covariance)
        return f

    def information(self) -> np.ndarray:
        """Inverse covariance; raises if the covariance is (near) singular."""
        return information_from_covariance(self.covariance)


def information_from_covariance(cov: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(cov)
    if w[0] <= 0.0 or w[-1] / w[0] > MAX_COVARIANCE_CONDITION:
        raise InvalidCovarianceError(
            f"covariance not positive definite or condition number above "
            f"{MAX_COVARIANCE_CONDITION:g} (eigenvalues {w})"
        )
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


def information_batch(covs: np.ndarray):
    """Vectorised :func:`information_from_covariance`: returns ``(info, ok)``.

    Rows whose covariance is not positive definite or too ill-conditioned
    have ``ok == False`` and an all-zero information matrix.
    """
    covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    info = np.zeros_like(covs)
    if len(covs) == 0:
        return info, np.zeros(0, dtype=bool)
    finite = np.all(np.isfinite(covs), axis=(1, 2))
    w = np.full((len(covs), 3), np.nan)
    w[finite] = np.linalg.eigvalsh(covs[finite])
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = finite & (w[:, 0] > 0.0) & (w[:, 2] / w[:, 0] <= MAX_COVARIANCE_CONDITION)
    if ok.any():
        inv = np.linalg.inv(covs[ok])
        info[ok] = 0.5 * (inv + inv.transpose(0, 2, 1))
    return info, ok


@dataclass(frozen=True)
class Clothoid:
    """Cubic lane/road description y(x) = y0 + theta0 x + c0 x²/2 + c1 x³/6."""

    y0: float = 0.0
    theta0: float = 0.0
    c0: float = 0.0
    c1: float = 0.0
    x_min: float = 0.0
    x_max: float = 120.0

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"empty validity interval [{self.x_min}, {self.x_max}]")
        if abs(self.theta0) > MAX_CLOTHOID_HEADING:
            raise ValueError(
                f"|theta0| = {abs(self.theta0):.4f} rad exceeds the 15 degree small-angle bound"
            )

    @property
    def params(self) -> np.ndarray:
        return np.array([self.y0, self.theta0, self.c0, self.c1])

    def _check(self, x) -> np.ndarray:
        xa = np.asarray(x, dtype=float)
        if np.any(xa < self.x_min) or np.any(xa > self.x_max):
            raise OutOfRangeError(f"x outside validity interval [{self.x_min}, {self.x_max}]")
        return xa

    def y(self, x):
        xa = self._check(x)
        out = self.y0 + xa * (self.theta0 + xa * (self.c0 / 2.0 + xa * self.c1 / 6.0))
        return float(out) if out.ndim == 0 else out

    def heading(self, x):
        xa = self._check(x)
        out = self.theta0 + xa * (self.c0 + xa * self.c1 / 2.0)
        return float(out) if out.ndim == 0 else out


def clothoid_eval(c: Clothoid, x):
    return c.y(x)


def clothoid_heading(c: Clothoid, x):
    return c.heading(x)


@dataclass(frozen=True)
class ControlVector:
    yaw_rate: float
    speed: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.speed < 0.0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")


def ctrv_motion(u: ControlVector) -> Pose2:
    """Pose increment of a constant-turn-rate unicycle over u.dt."""
    dtheta = u.yaw_rate * u.dt
    dist = u.speed * u.dt
    if abs(dtheta) < 1e-9:
        # second-order expansion keeps the small-angle limit smooth
        return Pose2(dist * (1.0 - dtheta**2 / 6.0), dist * dtheta / 2.0, dtheta)
    r = u.speed / u.yaw_rate
    return Pose2(r * math.sin(dtheta), r * (1.0 - math.cos(dtheta)), dtheta)
