"""Scenario construction: a world plus one nominal route per robot.

``crossing``  every robot drives the same rounded rectangle in the same
              direction, starting evenly spaced around it, so each robot
              later passes where the others have been.
``drift``     as ``crossing`` on a smaller loop, so robots lap it more
              than once and revisit their own past keyframes.
``corridor``  a two-lane corridor: a loop only a few metres wide, driven
              counter-clockwise by even robots and clockwise by odd ones.
              Robots meet head-on; their shared views come from the
              partner's pass in the same direction on the other lane.
``disjoint``  every robot has its own loop in its own region; one kind of
              region is dense with nearby features, the other nearly empty
              near the route, so their scenes never look alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose2
from .config import MissionConfig
from .motion import rounded_rectangle, route_polyline, route_poses
from .world import World, generate_world

# disjoint regions alternate by robot: a dense field of features close to the
# route, or a few outcrops kept far from it, so range histograms differ in
# both mass and shape
DISJOINT_DENSITY = (3.0, 0.35)
DISJOINT_CLEARANCE = (None, 20.0)  # None keeps the scenario clearance


@dataclass
class Scenario:
    world: World
    routes: list[list[Pose2]]  # nominal world-frame pose per keyframe step


def build_scenario(cfg: MissionConfig) -> Scenario:
    sc = cfg.scenario
    n_steps = sc.keyframes_per_robot - 1
    if sc.name in ("crossing", "drift", "corridor"):
        perimeter, pose_at = rounded_rectangle(sc.width, sc.height, sc.corner_radius)
        routes = []
        for r in range(cfg.robots):
            start = r * perimeter / cfg.robots
            if sc.name == "corridor" and r % 2 == 1:
                # clockwise arc length s sits at counter-clockwise -s; shift so robot 1
                # starts at the far end of the bottom leg, facing robot 0
                _, cw = rounded_rectangle(sc.width, sc.height, sc.corner_radius, clockwise=True)
                far_end = sc.width - 2 * sc.corner_radius
                routes.append(route_poses(cw, -far_end - (start - 0.5 * perimeter), sc.step_length, n_steps))
            else:
                routes.append(route_poses(pose_at, start, sc.step_length, n_steps))
        poly = route_polyline(pose_at, perimeter)
        extent = max(sc.width, sc.height) + 2 * sc.world_margin
        world = generate_world(cfg.seed, sc.n_features, extent, keep_out=poly, clearance=sc.clearance)
        return Scenario(world, routes)

    # disjoint: one loop per robot along x, each in a region of its own density
    span = max(sc.width, sc.height) + 2 * sc.world_margin
    world = None
    routes = []
    for r in range(cfg.robots):
        cx = r * (span + 2 * 30.0)
        perimeter, pose_at = rounded_rectangle(sc.width, sc.height, sc.corner_radius, center=(cx, 0.0))
        density = DISJOINT_DENSITY[r % 2]
        part = generate_world(
            cfg.seed * 1009 + r,
            max(1, int(round(density * sc.n_features))),
            span,
            keep_out=route_polyline(pose_at, perimeter),
            clearance=DISJOINT_CLEARANCE[r % 2] or sc.clearance,
            center=(cx, 0.0),
        )
        world = part if world is None else world.merged(part)
        routes.append(route_poses(pose_at, 0.0, sc.step_length, n_steps))
    world.seed = cfg.seed
    world.extent = float(cfg.robots * (span + 60.0))
    return Scenario(world, routes)


def trajectories_overlap(a: list[Pose2], b: list[Pose2], radius: float) -> bool:
    """Whether any pose of ``a`` lies within ``radius`` of any pose of ``b``."""
    pa = np.array([[p.x, p.y] for p in a])
    pb = np.array([[p.x, p.y] for p in b])
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1)
    return bool(np.any(d2 <= radius * radius))
