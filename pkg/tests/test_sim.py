import dataclasses
import math

import numpy as np
import pytest

from fleetslam.comms import Channel, Variant, causality_violations
from fleetslam.frontend import CfarParams, cfar_detect, extract_cloud
from fleetslam.geometry import Pose2, between, transform_points
from fleetslam.graph import FactorKind
from fleetslam.sim import (
    MissionConfig,
    World,
    apply_scenario,
    build_scenario,
    generate_world,
    merge_maps,
    run_mission,
    scenario_preset,
    simulate_scan,
)
from fleetslam.sim.config import (
    FactorNoiseConfig,
    NoiseConfig,
    config_from_dict,
    dump_config,
    load_config,
    save_config,
)
from fleetslam.sim.mission import write_outputs
from fleetslam.sim.motion import MotionNoise, RobotState, rounded_rectangle, route_poses, step_robot
from fleetslam.sim.node import RobotNode
from fleetslam.sim.scenario import trajectories_overlap
from fleetslam.sim.world import SonarParams, ray_cast

NOISELESS = NoiseConfig((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


def short(cfg: MissionConfig, keyframes: int) -> MissionConfig:
    return dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, keyframes_per_robot=keyframes))


def one_wall(x: float = 10.0, half: float = 5.0) -> World:
    return World(0, 100.0, [[x, -half, x, half]], [1.0])


# -- world and sonar -------------------------------------------------------


def test_generate_world_deterministic_and_clear_of_route():
    perim, pose_at = rounded_rectangle(40, 30, 5)
    poly = np.array([[p.x, p.y] for p in route_poses(pose_at, 0.0, 1.0, int(perim))])
    a = generate_world(3, 80, 80.0, keep_out=poly, clearance=3.0)
    b = generate_world(3, 80, 80.0, keep_out=poly, clearance=3.0)
    np.testing.assert_array_equal(a.walls, b.walls)
    np.testing.assert_array_equal(a.circles, b.circles)
    assert a.n_features == 80
    # circles keep their radius plus clearance off the route
    d = np.hypot(a.circles[:, None, 0] - poly[None, :, 0], a.circles[:, None, 1] - poly[None, :, 1]).min(axis=1)
    assert np.all(d - a.circles[:, 2] >= 3.0 - 0.6)  # route sampled at 1 m


def test_world_validation():
    with pytest.raises(ValueError):
        World(0, 10.0, [[0, 0, 1, 1]], [])
    with pytest.raises(ValueError):
        World(0, 10.0, [[0, 0, 1, 1]], [1.5])
    with pytest.raises(ValueError):
        generate_world(0, 0, 10.0)


def test_ray_cast_against_wall_geometry():
    bearings = np.radians([-40.0, -20.0, 0.0, 20.0, 40.0])
    r, refl = ray_cast(one_wall(), Pose2(), bearings, 30.0)
    hits = np.abs(bearings) < math.atan2(5, 10)
    np.testing.assert_allclose(r[hits], 10.0 / np.cos(bearings[hits]))
    assert np.all(np.isinf(r[~hits])) and np.all(refl[~hits] == 0)


def test_scan_deterministic():
    w = one_wall()
    a = simulate_scan(w, Pose2(1, 0, 0.1), scan_index=4, robot=1)
    b = simulate_scan(w, Pose2(1, 0, 0.1), scan_index=4, robot=1)
    np.testing.assert_array_equal(a.intensities, b.intensities)


def test_empty_world_false_alarm_rate():
    sonar = SonarParams()
    p = CfarParams(10, 2, 1e-4)
    empty = World(5, 100.0)
    n_scans = 10
    hits = sum(int(cfar_detect(simulate_scan(empty, Pose2(), sonar, scan_index=k), p).sum()) for k in range(n_scans))
    cells = n_scans * sonar.n_range_bins * sonar.n_beams
    mean = cells * p.pfa
    sd = math.sqrt(cells * p.pfa * (1 - p.pfa))
    assert abs(hits - mean) < 5 * sd


def test_single_wall_detections_at_expected_range():
    sonar = SonarParams()
    img = simulate_scan(one_wall(), Pose2(), sonar)
    mask = cfar_detect(img, CfarParams(10, 2, 1e-4))
    bearings = img.bearings(np.arange(sonar.n_beams))
    crosses = np.abs(bearings) < math.atan2(5, 10) - 1e-3
    expected = np.floor(10.0 / np.cos(bearings) / sonar.range_resolution).astype(int)
    beams = np.flatnonzero(crosses)
    found = [b for b in beams if mask[expected[b], b]]
    assert len(found) >= 0.95 * len(beams)
    bins, cols = np.nonzero(mask)
    near = crosses[cols] & (np.abs(bins - expected[cols]) <= 1)
    assert near.mean() > 0.95


# -- motion ------------------------------------------------------------------


def test_step_robot_noiseless_dead_reckoning_is_truth():
    rng = np.random.default_rng(0)
    state = RobotState(Pose2(1, 2, 0.3), Pose2(1, 2, 0.3))
    zero = MotionNoise()
    for _ in range(50):
        state, _ = step_robot(state, Pose2(0.5, 0.1, 0.05), zero, zero, rng)
        assert state.true_pose == state.dr_pose


def test_step_robot_identity_is_stationary():
    zero = MotionNoise()
    state = RobotState(Pose2(3, 4, 1.0), Pose2(3, 4, 1.0))
    new, _ = step_robot(state, Pose2(), zero, zero, np.random.default_rng(0))
    assert new == state


def test_dead_reckoning_drift_grows():
    noise = MotionNoise.from_degrees(0.05, 0.05, 1.0)
    first, last = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        state = RobotState(Pose2(), Pose2())
        errs = []
        for _ in range(40):
            state, _ = step_robot(state, Pose2(1.0, 0.0, 0.02), MotionNoise(), noise, rng)
            e = between(state.true_pose, state.dr_pose)
            errs.append(math.hypot(e.x, e.y))
        first.append(errs[0])
        last.append(errs[-1])
    assert np.median(last) > np.median(first)


def test_rounded_rectangle_route_is_continuous():
    for cw in (False, True):
        perim, pose_at = rounded_rectangle(60, 40, 6, clockwise=cw)
        poses = route_poses(pose_at, 0.0, 0.5, int(2 * perim))
        steps = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])]
        assert max(steps) <= 0.5 + 1e-9
        # heading follows the direction of travel
        for a, b in zip(poses[:-1:7], poses[1::7]):
            d = between(a, b)
            assert d.x > 0.0 and abs(d.y) < 0.05
    with pytest.raises(ValueError):
        rounded_rectangle(10, 10, 6)


# -- scenarios and config ------------------------------------------------------


def test_scenarios_overlap_as_designed():
    cross = build_scenario(MissionConfig(seed=1))
    assert trajectories_overlap(cross.routes[0], cross.routes[1], 15.0)
    dis = build_scenario(apply_scenario(MissionConfig(seed=1), "disjoint"))
    assert not trajectories_overlap(dis.routes[0], dis.routes[1], 30.0)


def test_drift_preset_raises_odometry_noise_and_model_together():
    cfg = apply_scenario(MissionConfig(), "drift")
    assert cfg.scenario.name == "drift"
    assert cfg.noise.odometry == cfg.factor_noise.odom
    assert cfg.noise.odometry[2] > MissionConfig().noise.odometry[2]
    assert scenario_preset("crossing") == MissionConfig().scenario
    with pytest.raises(ValueError):
        scenario_preset("moon")


def test_config_yaml_round_trip(tmp_path):
    cfg = apply_scenario(MissionConfig(case=2, seed=9, robots=3), "corridor")
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert "pfa" in dump_config(cfg)


def test_config_partial_and_invalid():
    cfg = config_from_dict({"seed": 4, "scenario": {"name": "drift"}, "sonar": {"fov": 90.0}})
    assert cfg.seed == 4 and cfg.scenario.name == "drift"
    assert cfg.sonar.fov == pytest.approx(math.radians(90))
    for bad in ({"case": 6}, {"robots": 1}, {"scenario": {"name": "x"}}, {"bogus": 1}, {"local_radii": []}, {"channel_loss": 0.1}):
        with pytest.raises(ValueError):
            config_from_dict(bad)


def test_case_flags_and_overrides():
    assert not MissionConfig(case=3).flags.compression
    assert MissionConfig(case=4).flags.compression
    assert not MissionConfig(case=5).flags.resend
    assert MissionConfig(case=3, compression=True).flags.compression


# -- maps --------------------------------------------------------------------


def test_merge_maps_single_robot_and_counts():
    rng = np.random.default_rng(0)
    clouds = {(0, k): rng.normal(size=(5 + k, 2)) for k in range(4)}
    ident = {k: Pose2() for k in clouds}
    pts, tags = merge_maps(ident, clouds)
    np.testing.assert_array_equal(pts, np.vstack([clouds[k] for k in sorted(clouds)]))
    assert len(pts) == sum(len(c) for c in clouds.values())
    assert set(map(tuple, tags)) == set(clouds)
    est = {(0, k): Pose2(k, 0, 0.1 * k) for k in range(4)}
    pts, _ = merge_maps(est, clouds)
    np.testing.assert_allclose(pts[:5], transform_points(est[(0, 0)], clouds[(0, 0)]))
    assert merge_maps({}, clouds)[0].shape == (0, 2)


def test_merge_maps_shared_wall_colocated():
    world = one_wall(12.0, 8.0)
    voxel = 0.3
    poses = {(0, 0): Pose2(0.0, -1.0, 0.0), (1, 0): Pose2(2.0, 1.5, 0.15)}
    clouds = {
        k: extract_cloud(simulate_scan(world, p, robot=k[0]), CfarParams(10, 2, 1e-4), voxel).points
        for k, p in poses.items()
    }
    pts, tags = merge_maps(poses, clouds)
    a, b = pts[tags[:, 0] == 0], pts[tags[:, 0] == 1]
    assert len(a) > 10 and len(b) > 10
    # every point of robot 1 lies on the shared wall near a point of robot 0
    on_wall = np.abs(b[:, 0] - 12.0) < 2 * voxel
    assert on_wall.mean() > 0.9
    common = b[on_wall & (b[:, 1] > a[:, 1].min()) & (b[:, 1] < a[:, 1].max())]
    d = np.min(np.hypot(common[:, None, 0] - a[None, :, 0], common[:, None, 1] - a[None, :, 1]), axis=1)
    assert np.all(d <= 2 * voxel)


# -- nodes and missions ------------------------------------------------------


def test_lone_robot_builds_connected_chain():
    cfg = short(MissionConfig(seed=2), 40)
    sc = build_scenario(cfg)
    channel = Channel([0])
    node = RobotNode(0, cfg, sc.world, sc.routes[0], channel)
    node.start(cfg.tick_seconds)
    for t in range(1, 40):
        node.tick((t + 1) * cfg.tick_seconds)
    keys = node.graph.keys_of(0)
    assert len(keys) == len(node.keyframes) > 10
    odom = {tuple(f.keys) for f in node.graph.factors if f.kind is FactorKind.ODOM}
    assert all(((0, k - 1), (0, k)) in odom for k in range(1, len(keys)))
    assert node.chi2 and all(math.isfinite(c) for c in node.chi2)
    assert node.n_ir_factors() == 0
    assert node.stats["ssm"] > 0


def test_noiseless_perfect_sensing_mission_is_accurate():
    # the estimator is told the odometry is exact, so errors come only from registration
    cfg = MissionConfig(
        case=4,
        seed=0,
        noise=NOISELESS,
        sonar=SonarParams(noise_power=0.0, speckle=0.0),
        factor_noise=FactorNoiseConfig(odom=(1e-3, 1e-3, 0.01), partner=(1e-3, 1e-3, 0.01)),
    )
    rep = run_mission(cfg).report
    assert rep.success
    assert rep.full.mae_t < 0.05


def test_corridor_opposite_directions_closes_loops():
    cfg = short(apply_scenario(MissionConfig(case=4, seed=3), "corridor"), 70)
    a, b = build_scenario(cfg).routes
    # opposite ends, facing each other
    assert abs(a[0].x - b[0].x) > 0.9 * cfg.scenario.width
    assert math.cos(a[0].theta - b[0].theta) < -0.99
    res = run_mission(cfg)
    assert res.report.ir_factors >= 1 and res.report.success
    assert causality_violations(res.channel.log) == []


def test_mission_report_sanity_and_outputs(tmp_path):
    res = run_mission(short(MissionConfig(case=4, seed=5), 60))
    r = res.report
    for block in (r.full, r.ir_only, r.own):
        if block.count:
            assert block.rmse_t >= block.mae_t - 1e-12
            assert block.rmse_r >= block.mae_r - 1e-12
    assert r.total_bits == sum(r.bits_by_variant.values())
    assert r.keyframes == sum(len(n.keyframes) for n in res.nodes)
    paths = write_outputs(res, tmp_path)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths.values())
    assert open(paths["merged_map"]).readline().strip() == "robot,keyframe,x,y"


def test_mission_deterministic():
    cfg = short(MissionConfig(case=3, seed=11), 40)
    a, b = run_mission(cfg), run_mission(cfg)
    assert a.report.row() == b.report.row()
    assert a.channel.log == b.channel.log


def test_gated_cases_accept_nested_ir_sets():
    def accepted(case):
        res = run_mission(short(MissionConfig(case=case, seed=4), 50))
        return {
            frozenset((tuple(f.keys),))
            for n in res.nodes
            for f in n.graph.factors
            if f.kind is FactorKind.IR
        }

    s1, s2, s3 = accepted(1), accepted(2), accepted(3)
    assert s3 and s1 >= s2 >= s3


def test_case5_only_drops_pose_updates():
    cfg3 = short(MissionConfig(case=3, seed=6), 50)
    log3 = run_mission(cfg3).channel.log
    log5 = run_mission(dataclasses.replace(cfg3, case=5)).channel.log
    assert any(e.variant is Variant.POSE_UPDATE for e in log3)
    assert not any(e.variant is Variant.POSE_UPDATE for e in log5)

    def core(log):
        keep = (Variant.DESCRIPTOR, Variant.CLOUD_REQUEST, Variant.CLOUD)
        return [(e.variant, e.sender, e.size_bits) for e in log if e.variant in keep]

    assert core(log3) == core(log5)
