"""SE(2) pose algebra, sonar projection and 2D point clouds.

Poses are stored as ``(x, y, theta)`` with theta wrapped to ``[-pi, pi)``.
The tangent space ordering used by :func:`log`, :func:`exp` and
:func:`adjoint` is ``(vx, vy, omega)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval [-pi, pi)."""
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)


@dataclass(frozen=True)
class Pose2:
    """Planar robot pose (meters, meters, radians)."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        x, y, t = float(self.x), float(self.y), float(self.theta)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(t)):
            raise ValueError(f"non-finite pose component: ({x}, {y}, {t})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta", wrap_angle(t))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Sequence[float]) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.x, self.y)
        return m

    def compose(self, other: "Pose2") -> "Pose2":
        return compose(self, other)

    def inverse(self) -> "Pose2":
        return inverse(self)

    def between(self, other: "Pose2") -> "Pose2":
        return between(self, other)

    def transform_point(self, p: Sequence[float]) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y])

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


# Relative transforms share the pose representation.
Transform2 = Pose2


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Return ``a (+) b``: apply ``b`` expressed in the frame of ``a``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose of ``b`` seen from ``a``, i.e. ``inverse(a) (+) b``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def _half_cot_half(theta: float) -> float:
    """(theta/2) * cot(theta/2), with its Taylor expansion near zero."""
    if abs(theta) < 1e-4:
        return 1.0 - theta * theta / 12.0
    half = 0.5 * theta
    return half * math.cos(half) / math.sin(half)


def log(p: Pose2) -> np.ndarray:
    """SE(2) logarithm, returning the twist ``(vx, vy, omega)``."""
    t = p.theta
    a = _half_cot_half(t)
    h = 0.5 * t
    return np.array([a * p.x + h * p.y, -h * p.x + a * p.y, t])


def exp(xi: Sequence[float]) -> Pose2:
    """SE(2) exponential of a twist ``(vx, vy, omega)``."""
    vx, vy, w = float(xi[0]), float(xi[1]), float(xi[2])
    if abs(w) < 1e-9:
        return Pose2(vx - 0.5 * w * vy, vy + 0.5 * w * vx, w)
    s, c = math.sin(w), math.cos(w)
    a, b = s / w, (1.0 - c) / w
    return Pose2(a * vx - b * vy, b * vx + a * vy, w)


def adjoint(p: Pose2) -> np.ndarray:
    """Adjoint matrix so that ``p Exp(xi) p^-1 = Exp(Ad(p) xi)``."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.y], [s, c, -p.x], [0.0, 0.0, 1.0]])


def poses_close(a: Pose2, b: Pose2, tol: float = 1e-9) -> bool:
    return (
        abs(a.x - b.x) <= tol
        and abs(a.y - b.y) <= tol
        and abs(wrap_angle(a.theta - b.theta)) <= tol
    )


@dataclass(frozen=True)
class SonarReturn:
    """A single sonar contact in sensor-centred spherical coordinates."""

    range: float
    bearing: float
    elevation: float = 0.0
    intensity: float = 0.0

    def __post_init__(self) -> None:
        if self.range < 0:
            raise ValueError("sonar range must be non-negative")
        if self.intensity < 0:
            raise ValueError("sonar intensity must be non-negative")
        object.__setattr__(self, "bearing", wrap_angle(self.bearing))


def polar_to_cartesian(ret: SonarReturn) -> tuple[float, float, float]:
    r, b, e = ret.range, ret.bearing, ret.elevation
    if e == 0.0:
        return (r * math.cos(b), r * math.sin(b), 0.0)
    ce = math.cos(e)
    return (r * ce * math.cos(b), r * ce * math.sin(b), r * math.sin(e))


@dataclass
class PointCloud2D:
    """Ordered planar point set in meters, expressed in keyframe ``frame``."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    frame: Optional[int] = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_iterable(cls, pts: Iterable[Sequence[float]], frame: Optional[int] = None) -> "PointCloud2D":
        return cls(np.array(list(pts), dtype=np.float64).reshape(-1, 2), frame)


CloudLike = Union[PointCloud2D, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    """Return the ``(N, 2)`` float array behind a cloud-like value."""
    if isinstance(cloud, PointCloud2D):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 2)


def transform_points(pose: Pose2, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ pose.rotation().T + np.array([pose.x, pose.y])


def transform_cloud(pose: Pose2, cloud: CloudLike) -> PointCloud2D:
    frame = cloud.frame if isinstance(cloud, PointCloud2D) else None
    return PointCloud2D(transform_points(pose, as_points(cloud)), frame)


# -- vectorised helpers used by the optimizer --------------------------------


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise compose of ``(N, 3)`` pose arrays."""
    c, s = np.cos(a[:, 2]), np.sin(a[:, 2])
    out = np.empty_like(a, dtype=float)
    out[:, 0] = a[:, 0] + c * b[:, 0] - s * b[:, 1]
    out[:, 1] = a[:, 1] + s * b[:, 0] + c * b[:, 1]
    out[:, 2] = wrap_angles(a[:, 2] + b[:, 2])
    return out


def log_arrays(e: np.ndarray) -> np.ndarray:
    """Row-wise SE(2) log of ``(N, 3)`` arrays (theta assumed wrapped)."""
    t = e[:, 2]
    half = 0.5 * t
    small = np.abs(t) < 1e-4
    safe_half = np.where(small, 1.0, half)
    a = np.where(small, 1.0 - t * t / 12.0, safe_half * np.cos(safe_half) / np.sin(safe_half))
    out = np.empty_like(e, dtype=float)
    out[:, 0] = a * e[:, 0] + half * e[:, 1]
    out[:, 1] = -half * e[:, 0] + a * e[:, 1]
    out[:, 2] = t
    return out
