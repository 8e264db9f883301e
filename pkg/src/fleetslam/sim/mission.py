"""Mission orchestration, evaluation metrics and output files."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..comms import Channel, ChannelEvent, Utilization, Variant, utilization, write_log_csv
from ..geometry import Pose2, between, transform_points, wrap_angle
from ..graph import export_g2o
from .config import MissionConfig
from .node import RobotNode
from .scenario import Scenario, build_scenario, trajectories_overlap

Key = tuple[int, int]


@dataclass
class ErrorBlock:
    """MAE / RMSE of translation (m) and rotation (deg) over ``count`` poses."""

    count: int = 0
    mae_t: float = float("nan")
    rmse_t: float = float("nan")
    mae_r: float = float("nan")
    rmse_r: float = float("nan")

    @classmethod
    def from_errors(cls, et: Sequence[float], er: Sequence[float]) -> "ErrorBlock":
        if len(et) == 0:
            return cls()
        et, er = np.asarray(et), np.asarray(er)
        return cls(
            len(et),
            float(np.mean(et)),
            float(np.sqrt(np.mean(et**2))),
            float(np.mean(er)),
            float(np.sqrt(np.mean(er**2))),
        )


@dataclass
class MetricsReport:
    case: int
    seed: int
    scenario: str
    robots: int
    keyframes: int
    ir_factors: int
    full: ErrorBlock
    ir_only: ErrorBlock
    own: ErrorBlock
    net_avg_bps: float
    net_min_bps: float
    net_max_bps: float
    total_bits: int
    bits_by_variant: dict[str, int]
    success: bool
    overlap_exists: bool
    runtime_s: float = field(default=0.0, compare=False)

    def row(self) -> dict[str, object]:
        """Flat, deterministic representation (runtime excluded)."""
        out: dict[str, object] = {
            "case": self.case,
            "seed": self.seed,
            "scenario": self.scenario,
            "robots": self.robots,
            "keyframes": self.keyframes,
            "ir_factors": self.ir_factors,
        }
        for name, block in (("full", self.full), ("ir", self.ir_only), ("own", self.own)):
            out[f"{name}_count"] = block.count
            for f in ("mae_t", "rmse_t", "mae_r", "rmse_r"):
                out[f"{name}_{f}"] = _fmt(getattr(block, f))
        out["net_avg_bps"] = _fmt(self.net_avg_bps)
        out["net_min_bps"] = _fmt(self.net_min_bps)
        out["net_max_bps"] = _fmt(self.net_max_bps)
        out["total_bits"] = self.total_bits
        for v in Variant:
            out[f"bits_{v.value}"] = self.bits_by_variant.get(v.value, 0)
        out["success"] = int(self.success)
        out["overlap_exists"] = int(self.overlap_exists)
        return out


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


@dataclass
class MissionResult:
    config: MissionConfig
    scenario: Scenario
    nodes: list[RobotNode]
    channel: Channel
    report: MetricsReport
    usage: Utilization


def run_mission(cfg: MissionConfig, scenario: Optional[Scenario] = None) -> MissionResult:
    """Run every robot to the end of its route and evaluate.

    Ticks are interleaved round-robin by robot id. A few extra ticks without
    motion let in-flight requests and replies settle.
    """
    cfg.validate()
    t0 = time.perf_counter()
    sc = scenario if scenario is not None else build_scenario(cfg)
    channel = Channel(range(cfg.robots), per_recipient=cfg.per_recipient_metering)
    nodes = [RobotNode(r, cfg, sc.world, sc.routes[r], channel) for r in range(cfg.robots)]
    dt = cfg.tick_seconds
    for n in nodes:
        n.start(dt)
    n_ticks = max(len(route) for route in sc.routes) - 1
    tick = 0
    for tick in range(1, n_ticks + 1):
        for n in nodes:
            n.tick((tick + 1) * dt)
    for extra in range(1, cfg.flush_ticks + 1):
        for n in nodes:
            n.tick((tick + 1 + extra) * dt, moving=False)
    duration = (tick + 1 + cfg.flush_ticks) * dt

    usage = utilization(channel.log, 100, start=0.0, duration=duration)
    report = evaluate(cfg, sc, nodes, channel.log, usage)
    report.runtime_s = time.perf_counter() - t0
    return MissionResult(cfg, sc, nodes, channel, report, usage)


def partner_errors(observer: RobotNode, partner: RobotNode, keys: Sequence[Key]) -> tuple[list[float], list[float]]:
    """Errors of ``observer``'s estimates of ``partner`` keyframes, in the observer's true frame."""
    origin = observer.keyframes[0].true_pose
    et, er = [], []
    for k in keys:
        est = observer.graph.poses[k]
        truth = between(origin, partner.keyframes[k[1]].true_pose)
        et.append(math.hypot(est.x - truth.x, est.y - truth.y))
        er.append(abs(math.degrees(wrap_angle(est.theta - truth.theta))))
    return et, er


def evaluate(
    cfg: MissionConfig,
    sc: Scenario,
    nodes: Sequence[RobotNode],
    log: Sequence[ChannelEvent],
    usage: Utilization,
) -> MetricsReport:
    full_t, full_r, ir_t, ir_r, own_t, own_r = [], [], [], [], [], []
    for a in nodes:
        et, er = partner_errors(a, a, a.graph.keys_of(a.id))
        own_t += et
        own_r += er
        for b in nodes:
            if b.id == a.id:
                continue
            et, er = partner_errors(a, b, a.graph.keys_of(b.id))
            full_t += et
            full_r += er
            et, er = partner_errors(a, b, a.ir_factor_keys(b.id))
            ir_t += et
            ir_r += er
    bits: dict[str, int] = {}
    for e in log:
        bits[e.variant.value] = bits.get(e.variant.value, 0) + e.size_bits
    ir_total = sum(n.n_ir_factors() for n in nodes)
    overlap_exists = any(
        trajectories_overlap(sc.routes[i], sc.routes[j], 0.5 * cfg.sonar.max_range)
        for i in range(len(nodes))
        for j in range(i + 1, len(nodes))
    )
    return MetricsReport(
        case=cfg.case,
        seed=cfg.seed,
        scenario=cfg.scenario.name,
        robots=cfg.robots,
        keyframes=sum(len(n.keyframes) for n in nodes),
        ir_factors=ir_total,
        full=ErrorBlock.from_errors(full_t, full_r),
        ir_only=ErrorBlock.from_errors(ir_t, ir_r),
        own=ErrorBlock.from_errors(own_t, own_r),
        net_avg_bps=usage.average,
        net_min_bps=usage.minimum,
        net_max_bps=usage.maximum,
        total_bits=usage.total_bits,
        bits_by_variant=bits,
        success=ir_total > 0,
        overlap_exists=overlap_exists,
    )


def merge_maps(
    estimates: Mapping[Key, Pose2],
    clouds: Mapping[Key, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Transform every keyframe cloud with an estimate into the common frame.

    Returns:
        ``(points, keys)``: points ``(N, 2)`` and the ``(robot, keyframe)``
        tag of each point ``(N, 2)``, in key order.
    """
    pts, tags = [], []
    for key in sorted(clouds):
        if key not in estimates:
            continue
        c = np.asarray(clouds[key], dtype=np.float64).reshape(-1, 2)
        pts.append(transform_points(estimates[key], c))
        tags.append(np.tile(np.array(key, dtype=np.int64), (len(c), 1)))
    if not pts:
        return np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64)
    return np.vstack(pts), np.vstack(tags)


def node_map(node: RobotNode) -> tuple[np.ndarray, np.ndarray]:
    """Merged map from ``node``'s point of view: own clouds plus received partner clouds."""
    clouds: dict[Key, np.ndarray] = {node.key(kf.index): kf.points for kf in node.keyframes}
    clouds.update(node.cloud_cache)
    return merge_maps(node.graph.poses, clouds)


def write_metrics_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_map_csv(points: np.ndarray, tags: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("robot", "keyframe", "x", "y"))
        for (r, k), (x, y) in zip(tags, points):
            w.writerow((int(r), int(k), f"{x:.4f}", f"{y:.4f}"))


def write_outputs(result: MissionResult, out_dir: str | Path) -> dict[str, Path]:
    """Write metrics.csv, channel_log.csv, graph.g2o and merged_map.csv.

    The graph and map are robot 0's view of the team.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "channel_log": out / "channel_log.csv",
        "graph": out / "graph.g2o",
        "merged_map": out / "merged_map.csv",
    }
    write_metrics_csv([result.report], paths["metrics"])
    write_log_csv(result.channel.log, paths["channel_log"])
    export_g2o(result.nodes[0].graph, paths["graph"])
    write_map_csv(*node_map(result.nodes[0]), paths["merged_map"])
    return paths


def with_overrides(cfg: MissionConfig, **changes) -> MissionConfig:
    return dataclasses.replace(cfg, **changes)
