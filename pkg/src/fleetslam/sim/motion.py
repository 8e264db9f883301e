"""Robot motion with process and odometry noise, and route generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..geometry import Pose2, Transform2, between, compose


@dataclass(frozen=True)
class MotionNoise:
    """Zero-mean Gaussian std devs per axis (meters, meters, radians)."""

    sigma_x: float = 0.0
    sigma_y: float = 0.0
    sigma_theta: float = 0.0

    def __post_init__(self) -> None:
        if min(self.sigma_x, self.sigma_y, self.sigma_theta) < 0:
            raise ValueError("noise std devs must be non-negative")

    @classmethod
    def from_degrees(cls, sx: float, sy: float, st_deg: float) -> "MotionNoise":
        return cls(sx, sy, math.radians(st_deg))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sigma_x, self.sigma_y, self.sigma_theta)

    def sample(self, rng: np.random.Generator) -> Pose2:
        n = rng.standard_normal(3) * np.array(self.as_tuple())
        return Pose2(n[0], n[1], n[2])


@dataclass(frozen=True)
class RobotState:
    true_pose: Pose2
    dr_pose: Pose2


def step_robot(
    state: RobotState,
    u: Transform2,
    process: MotionNoise,
    odometry: MotionNoise,
    rng: np.random.Generator,
) -> tuple[RobotState, Transform2]:
    """Advance one control step.

    The true pose moves by ``u`` perturbed by process noise; dead reckoning
    integrates ``u`` perturbed by an independent odometry noise sample.

    Returns:
        The new state and the odometry increment fed to dead reckoning.
    """
    true_new = compose(state.true_pose, compose(u, process.sample(rng)))
    odom = compose(u, odometry.sample(rng))
    return RobotState(true_new, compose(state.dr_pose, odom)), odom


def rounded_rectangle(
    width: float,
    height: float,
    radius: float,
    center: Sequence[float] = (0.0, 0.0),
    clockwise: bool = False,
):
    """Arc-length parameterisation of a rounded rectangle.

    Returns ``(perimeter, pose_at)`` where ``pose_at(s)`` is the pose at arc
    length ``s`` (wrapped), heading along the direction of travel. Travel is
    counter-clockwise unless ``clockwise`` is set.
    """
    if radius <= 0 or 2 * radius >= min(width, height):
        raise ValueError("corner radius must be positive and fit the rectangle")
    cx, cy = center
    a, b = 0.5 * width - radius, 0.5 * height - radius
    # counter-clockwise pieces starting at the bottom edge going +x
    pieces = [
        ("line", (cx - a, cy - b - radius), 0.0, 2 * a),
        ("arc", (cx + a, cy - b), -0.5 * math.pi, 0.5 * math.pi * radius),
        ("line", (cx + a + radius, cy - b), 0.5 * math.pi, 2 * b),
        ("arc", (cx + a, cy + b), 0.0, 0.5 * math.pi * radius),
        ("line", (cx + a, cy + b + radius), math.pi, 2 * a),
        ("arc", (cx - a, cy + b), 0.5 * math.pi, 0.5 * math.pi * radius),
        ("line", (cx - a - radius, cy + b), -0.5 * math.pi, 2 * b),
        ("arc", (cx - a, cy - b), math.pi, 0.5 * math.pi * radius),
    ]
    perimeter = sum(p[3] for p in pieces)

    def ccw_pose(s: float) -> Pose2:
        s = s % perimeter
        for kind, ref, ang, length in pieces:
            if s <= length:
                break
            s -= length
        s = min(s, length)
        if kind == "line":
            return Pose2(ref[0] + s * math.cos(ang), ref[1] + s * math.sin(ang), ang)
        phi = ang + s / radius
        return Pose2(ref[0] + radius * math.cos(phi), ref[1] + radius * math.sin(phi), phi + 0.5 * math.pi)

    if not clockwise:
        return perimeter, ccw_pose

    def cw_pose(s: float) -> Pose2:
        p = ccw_pose(-s)
        return Pose2(p.x, p.y, p.theta + math.pi)

    return perimeter, cw_pose


def route_poses(pose_at, start: float, step: float, n_steps: int) -> list[Pose2]:
    """``n_steps + 1`` nominal poses spaced ``step`` apart along a route."""
    return [pose_at(start + k * step) for k in range(n_steps + 1)]


def route_polyline(pose_at, perimeter: float, spacing: float = 1.0) -> np.ndarray:
    n = max(int(math.ceil(perimeter / spacing)), 4)
    pts = [pose_at(perimeter * k / n) for k in range(n + 1)]
    return np.array([[p.x, p.y] for p in pts])


def tracking_control(true_pose: Pose2, target: Pose2) -> Transform2:
    """Control that would take ``true_pose`` exactly onto ``target``."""
    return between(true_pose, target)
