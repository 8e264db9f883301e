"""Synthetic seabed worlds and a forward-looking imaging sonar model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..frontend import PolarImage, uniform_bearings
from ..geometry import Pose2


@dataclass
class World:
    """Wall segments and circular scatterers inside a square extent.

    ``walls`` has shape ``(K, 4)`` as ``(x0, y0, x1, y1)``; ``circles`` has
    shape ``(M, 3)`` as ``(cx, cy, radius)``. Reflectivities lie in (0, 1].
    """

    seed: int
    extent: float
    walls: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    wall_reflectivity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    circles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    circle_reflectivity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
        self.circles = np.asarray(self.circles, dtype=np.float64).reshape(-1, 3)
        self.wall_reflectivity = np.asarray(self.wall_reflectivity, dtype=np.float64).reshape(-1)
        self.circle_reflectivity = np.asarray(self.circle_reflectivity, dtype=np.float64).reshape(-1)
        if len(self.wall_reflectivity) != len(self.walls) or len(self.circle_reflectivity) != len(self.circles):
            raise ValueError("one reflectivity per feature required")
        refl = np.concatenate([self.wall_reflectivity, self.circle_reflectivity])
        if np.any(refl <= 0) or np.any(refl > 1):
            raise ValueError("reflectivity must lie in (0, 1]")

    @property
    def n_features(self) -> int:
        return len(self.walls) + len(self.circles)

    def merged(self, other: "World") -> "World":
        return World(
            self.seed,
            max(self.extent, other.extent),
            np.vstack([self.walls, other.walls]),
            np.concatenate([self.wall_reflectivity, other.wall_reflectivity]),
            np.vstack([self.circles, other.circles]),
            np.concatenate([self.circle_reflectivity, other.circle_reflectivity]),
        )


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point in ``p`` (N,2) to segment ``ab``."""
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    return np.hypot(*(p - (a + t[:, None] * ab)).T)


def generate_world(
    seed: int,
    n_features: int,
    extent: float,
    keep_out: Optional[np.ndarray] = None,
    clearance: float = 3.0,
    wall_fraction: float = 0.5,
    center: Sequence[float] = (0.0, 0.0),
) -> World:
    """Random walls and scatterers inside ``center +- extent / 2``.

    ``keep_out`` is a polyline ``(P, 2)`` that no feature may approach
    closer than ``clearance``; it keeps features off the robots' routes.
    Walls are 2-8 m long at uniform random orientation; scatterers have
    0.3-1.5 m radius.
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    if extent <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    half = 0.5 * extent
    c = np.asarray(center, dtype=np.float64)
    walls, wref, circles, cref = [], [], [], []
    attempts = 0
    while len(walls) + len(circles) < n_features:
        attempts += 1
        if attempts > 1000 * n_features:
            raise RuntimeError("could not place features outside the keep-out corridor")
        is_wall = rng.random() < wall_fraction
        p = c + rng.uniform(-half, half, size=2)
        if is_wall:
            length = rng.uniform(2.0, 8.0)
            ang = rng.uniform(0.0, math.pi)
            d = 0.5 * length * np.array([math.cos(ang), math.sin(ang)])
            a, b = p - d, p + d
            if np.any(np.abs(a - c) > half) or np.any(np.abs(b - c) > half):
                continue
            probe = a + np.linspace(0.0, 1.0, 17)[:, None] * (b - a)
            reach = 0.0
        else:
            radius = rng.uniform(0.3, 1.5)
            if np.any(np.abs(p - c) + radius > half):
                continue
            probe = p[None, :]
            reach = radius
        if keep_out is not None and len(keep_out) >= 2:
            near = min(
                float(_segment_distance(probe, keep_out[i], keep_out[i + 1]).min())
                for i in range(len(keep_out) - 1)
            )
            if near - reach < clearance:
                continue
        refl = rng.uniform(0.3, 1.0)
        if is_wall:
            walls.append(np.concatenate([a, b]))
            wref.append(refl)
        else:
            circles.append([p[0], p[1], radius])
            cref.append(refl)
    return World(seed, extent, np.array(walls).reshape(-1, 4), np.array(wref),
                 np.array(circles).reshape(-1, 3), np.array(cref))


@dataclass(frozen=True)
class SonarParams:
    max_range: float = 30.0
    fov: float = math.radians(130.0)
    n_beams: int = 256
    range_resolution: float = 0.1
    noise_power: float = 0.002  # mean of the exponential background power
    speckle: float = 0.2  # relative std of the return amplitude

    def __post_init__(self) -> None:
        if self.max_range <= 0 or self.range_resolution <= 0 or self.n_beams < 1:
            raise ValueError("sonar geometry must be positive")
        if not 0 < self.fov <= 2 * math.pi:
            raise ValueError("fov must lie in (0, 2*pi]")
        if self.noise_power < 0 or self.speckle < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def n_range_bins(self) -> int:
        return int(round(self.max_range / self.range_resolution))


def ray_cast(world: World, pose: Pose2, bearings: np.ndarray, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """First-hit range and reflectivity per ray (``inf`` / 0 when nothing is hit)."""
    ang = pose.theta + bearings
    d = np.column_stack([np.cos(ang), np.sin(ang)])  # (B, 2)
    o = np.array([pose.x, pose.y])
    best = np.full(len(bearings), np.inf)
    refl = np.zeros(len(bearings))

    if len(world.walls):
        a = world.walls[:, :2]
        e = world.walls[:, 2:] - a  # (K, 2)
        w = a - o  # (K, 2)
        # solve o + t d = a + s e  ->  t d - s e = w
        den = d[:, None, 0] * (-e[None, :, 1]) - d[:, None, 1] * (-e[None, :, 0])  # (B, K)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[None, :, 0] * (-e[None, :, 1]) - w[None, :, 1] * (-e[None, :, 0])) / den
            s = (d[:, None, 0] * w[None, :, 1] - d[:, None, 1] * w[None, :, 0]) / den
        ok = (np.abs(den) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(bearings)), k]
        hit = tk < best
        best = np.where(hit, tk, best)
        refl = np.where(hit, world.wall_reflectivity[k], refl)

    if len(world.circles):
        cpos = world.circles[:, :2] - o  # (M, 2)
        r = world.circles[:, 2]
        proj = d @ cpos.T  # (B, M)
        perp2 = (cpos**2).sum(axis=1)[None, :] - proj**2
        disc = r[None, :] ** 2 - perp2
        with np.errstate(invalid="ignore"):
            t = proj - np.sqrt(disc)
        ok = (disc >= 0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(bearings)), k]
        hit = tk < best
        best = np.where(hit, tk, best)
        refl = np.where(hit, world.circle_reflectivity[k], refl)

    out = best < max_range
    return np.where(out, best, np.inf), np.where(out, refl, 0.0)


def scan_rng(world_seed: int, robot: int, scan_index: int) -> np.random.Generator:
    return np.random.default_rng([int(world_seed), int(robot), int(scan_index)])


def simulate_scan(
    world: World,
    pose: Pose2,
    sonar: SonarParams = SonarParams(),
    scan_index: int = 0,
    robot: int = 0,
) -> PolarImage:
    """Render a polar sonar image from ``pose``.

    Background power is exponential (the square of a Rayleigh amplitude)
    with mean ``noise_power``. Each beam's first hit within range adds power
    ``(reflectivity * (1 + speckle * N(0, 1)))^2`` to its range bin. Noise
    is seeded by ``(world seed, robot, scan_index)``.
    """
    rng = scan_rng(world.seed, robot, scan_index)
    n_bins, n_beams = sonar.n_range_bins, sonar.n_beams
    bearings = uniform_bearings(n_beams, sonar.fov)
    rng_noise = rng.standard_exponential((n_bins, n_beams)) * sonar.noise_power
    speck = rng.standard_normal(n_beams)
    ranges, refl = ray_cast(world, pose, bearings, sonar.max_range)
    img = rng_noise
    hit = np.isfinite(ranges)
    bins = np.minimum((ranges[hit] / sonar.range_resolution).astype(np.int64), n_bins - 1)
    amp = np.maximum(refl[hit] * (1.0 + sonar.speckle * speck[hit]), 0.0)
    img[bins, np.flatnonzero(hit)] += amp**2
    return PolarImage(img, sonar.range_resolution, sonar.fov)
