"""Per-robot SLAM node: keyframing, scan matching, descriptor-first loop
closure exchange with teammates, and partner trajectory tracking."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import codec
from ..comms import (
    Channel,
    CloudMsg,
    CloudRequestMsg,
    DescriptorMsg,
    LoopMsg,
    PoseUpdateMsg,
    f32,
    f32_pose,
)
from ..frontend import extract_cloud
from ..geometry import Pose2, between, wrap_angle
from ..graph import (
    Factor,
    FactorKind,
    GraphState,
    add_factor,
    changed_poses,
    diag_cov,
    maybe_add_keyframe,
    optimize,
)
from ..inlier import (
    LoopCandidate,
    PcmPool,
    RelativeEstimate,
    chain_estimate,
    reverse_estimate,
    gate_post,
    gate_pre,
)
from ..place import DescriptorTree, SceneDescriptor, SceneImage, make_descriptor, make_scene_image
from ..registration import DegenerateRegistrationError, global_register, overlap, staged_icp
from .config import MissionConfig
from .motion import RobotState, step_robot, tracking_control
from .world import World, simulate_scan

log = logging.getLogger(__name__)

Key = tuple[int, int]
_RECOVERABLE = (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError, KeyError)


def _deg_sigmas(s: tuple[float, float, float]) -> tuple[float, float, float]:
    return (s[0], s[1], math.radians(s[2]))


@dataclass
class Keyframe:
    index: int
    points: np.ndarray  # sensor frame
    descriptor: SceneDescriptor
    image: SceneImage
    dr_pose: Pose2
    true_pose: Pose2  # ground truth, used only for evaluation


class RobotNode:
    def __init__(self, robot_id: int, cfg: MissionConfig, world: World, route: list[Pose2], channel: Channel):
        self.id = robot_id
        self.cfg = cfg
        self.flags = cfg.flags
        self.world = world
        self.route = route
        self.channel = channel
        self.rng = np.random.default_rng([cfg.seed, robot_id, 7])
        self.process = cfg.noise.process_noise()
        self.odometry_noise = cfg.noise.odometry_noise()
        fn = cfg.factor_noise
        self.odom_cov = diag_cov(_deg_sigmas(fn.odom))
        self.partner_cov = diag_cov(_deg_sigmas(fn.partner))
        self.prior_cov = diag_cov(_deg_sigmas(fn.prior))

        self.state = RobotState(route[0], Pose2())
        self.step = 0
        self.graph = GraphState(robot_id)
        self.keyframes: list[Keyframe] = []
        self.tree = DescriptorTree()
        self.sent_poses: dict[int, Pose2] = {}

        self.partner_poses: dict[int, dict[int, Pose2]] = defaultdict(dict)
        self.partner_dirty: set[int] = set()
        self.matches: dict[Key, list[int]] = defaultdict(list)
        self.requested: set[Key] = set()
        self.cloud_cache: dict[Key, np.ndarray] = {}
        self.nssm_pool = PcmPool(cfg.gates.pcm_threshold, 1)
        self.ir_pools: dict[int, PcmPool] = {}
        self.ir_dirty: set[int] = set()
        self.accepted_ir: dict[int, list[LoopCandidate]] = {}
        self.announced: set = set()
        self.stats: Counter = Counter()
        self.chi2: list[float] = []
        self._rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- helpers -------------------------------------------------------------

    def key(self, k: int) -> Key:
        return (self.id, k)

    def registration_cov(self, rmse: float) -> np.ndarray:
        fn = self.cfg.factor_noise
        st = max(fn.registration_scale * rmse, fn.registration_floor)
        return diag_cov((st, st, st / fn.registration_lever))

    def odometry(self, a: Key, b: Key) -> RelativeEstimate:
        """Relative estimate between two keyframes of one robot for PCM.

        Own keyframes use dead reckoning; partner keyframes use the poses the
        partner has broadcast.
        """
        if a[0] != b[0]:
            raise ValueError("odometry endpoints must be on one robot")
        lo, hi = sorted((a[1], b[1]))
        ids, rows = self._chain_rows(a[0])
        i, j = np.searchsorted(ids, [lo, hi + 1])
        cov = self.odom_cov if a[0] == self.id else self.partner_cov
        est = chain_estimate(rows[i:j], cov)
        return reverse_estimate(est) if a[1] > b[1] else est

    def _chain_rows(self, robot: int) -> tuple[np.ndarray, np.ndarray]:
        """Sorted keyframe ids and pose rows used for odometry lookups (cached)."""
        if robot not in self._rows:
            if robot == self.id:
                ids = np.arange(len(self.keyframes))
                rows = np.array([kf.dr_pose.as_array() for kf in self.keyframes]).reshape(-1, 3)
            else:
                known = self.partner_poses[robot]
                ids = np.array(sorted(known), dtype=np.int64)
                rows = np.array([known[k].as_array() for k in ids]).reshape(-1, 3)
            self._rows[robot] = (ids, rows)
        return self._rows[robot]

    def _optimize(self) -> None:
        try:
            res = optimize(self.graph)
            self.chi2.append(res.chi2[-1])
        except _RECOVERABLE as exc:  # keep the previous estimate
            log.warning("robot %d: optimisation failed: %s", self.id, exc)
            self.stats["optimize_failed"] += 1

    def _send(self, msg, t: float) -> None:
        self.channel.broadcast(msg, t)
        self.stats[f"sent_{msg.variant.value}"] += 1

    # -- tick ----------------------------------------------------------------

    def start(self, t: float) -> None:
        """Create keyframe 0 with the prior."""
        self._new_keyframe(t)

    def move(self) -> bool:
        """Drive one control step; returns True if a keyframe is due."""
        if self.step + 1 >= len(self.route):
            return False
        u = tracking_control(self.state.true_pose, self.route[self.step + 1])
        self.state, _ = step_robot(self.state, u, self.process, self.odometry_noise, self.rng)
        self.step += 1
        delta = between(self.keyframes[-1].dr_pose, self.state.dr_pose)
        return maybe_add_keyframe(delta, self.cfg.keyframe)

    def tick(self, t: float, moving: bool = True) -> None:
        changed = False
        if moving and self.move():
            self._new_keyframe(t)
        for d in self.channel.receive(self.id):
            try:
                changed |= self._handle(d.message, t)
            except _RECOVERABLE as exc:
                log.warning("robot %d: dropped %s: %s", self.id, d.message.variant.value, exc)
                self.stats["message_errors"] += 1
        changed |= self._refresh_partners(t)
        if changed:
            self._optimize()
        self._maybe_resend(t)

    # -- keyframes -----------------------------------------------------------

    def _new_keyframe(self, t: float) -> None:
        k = len(self.keyframes)
        sonar = self.cfg.sonar
        img = simulate_scan(self.world, self.state.true_pose, sonar, scan_index=k, robot=self.id)
        pts = extract_cloud(img, self.cfg.cfar, self.cfg.frontend_voxel).points
        kf = Keyframe(
            k,
            pts,
            make_descriptor(pts, sonar.max_range),
            make_scene_image(pts, max_range=sonar.max_range),
            self.state.dr_pose,
            self.state.true_pose,
        )
        self.keyframes.append(kf)
        self._rows.pop(self.id, None)
        if k == 0:
            add_factor(self.graph, Factor(FactorKind.PRIOR, [self.key(0)], Pose2(), self.prior_cov))
        else:
            odom = between(self.keyframes[k - 1].dr_pose, kf.dr_pose)
            add_factor(self.graph, Factor(FactorKind.ODOM, [self.key(k - 1), self.key(k)], odom, self.odom_cov))
            self._try_ssm(k, odom)
            self._search_nssm(k)
        self._optimize()
        pose = f32_pose(self.graph.poses[self.key(k)])
        self._send(DescriptorMsg(self.id, k, pose, kf.descriptor.bins), t)
        self.sent_poses[k] = pose
        self.tree.insert(k, kf.descriptor)

    def _try_ssm(self, k: int, odom: Pose2) -> None:
        prev, cur = self.keyframes[k - 1], self.keyframes[k]
        if min(len(prev.points), len(cur.points)) < 10:
            return
        try:
            res = staged_icp(cur.points, prev.points, odom, self.cfg.local_radii)
        except _RECOVERABLE:
            self.stats["ssm_failed"] += 1
            return
        dev = between(odom, res.transform)
        max_t, max_r = self.cfg.ssm_max_deviation
        if math.hypot(dev.x, dev.y) > max_t or abs(math.degrees(dev.theta)) > max_r:
            self.stats["ssm_rejected"] += 1
            return
        if not gate_post(overlap(cur.points, prev.points, res.transform), self.cfg.gates):
            self.stats["ssm_rejected"] += 1
            return
        add_factor(
            self.graph,
            Factor(FactorKind.SSM, [self.key(k - 1), self.key(k)], res.transform, self.registration_cov(res.rmse)),
        )
        self.stats["ssm"] += 1

    def _search_nssm(self, k: int) -> None:
        cur = self.keyframes[k]
        if len(cur.points) < self.cfg.gates.min_points:
            return
        est_k = self.graph.poses[self.key(k)]
        near = []
        for i in range(0, k - self.cfg.nssm_min_gap):
            est_i = self.graph.poses[self.key(i)]
            d = math.hypot(est_i.x - est_k.x, est_i.y - est_k.y)
            if d <= self.cfg.nssm_radius and abs(wrap_angle(est_i.theta - est_k.theta)) <= math.radians(45.0):
                near.append((d, i))
        added = False
        for _, i in sorted(near)[: self.cfg.nssm_max_candidates]:
            old = self.keyframes[i]
            if len(old.points) < self.cfg.gates.min_points:
                continue
            try:
                init = between(self.graph.poses[self.key(i)], est_k)
                res = staged_icp(cur.points, old.points, init, self.cfg.local_radii)
                ovl = overlap(cur.points, old.points, res.transform)
            except _RECOVERABLE:
                self.stats["nssm_failed"] += 1
                continue
            if not gate_post(ovl, self.cfg.gates):
                self.stats["nssm_rejected"] += 1
                continue
            cand = LoopCandidate(self.key(i), self.key(k), res.transform, self.registration_cov(res.rmse), ovl, res.rmse)
            added |= self.nssm_pool.add(cand)
        if added:
            self._refresh_nssm()

    def _refresh_nssm(self) -> None:
        pool = self.nssm_pool
        chosen = pool.select(self.odometry) if self.flags.use_pcm else list(pool.candidates)
        self.graph.remove_factors(FactorKind.NSSM)
        for c in chosen:
            add_factor(self.graph, Factor(FactorKind.NSSM, [c.src, c.dst], c.relative, c.covariance))
        self.stats["nssm"] = len(chosen)

    # -- messages ------------------------------------------------------------

    def _handle(self, m, t: float) -> bool:
        if isinstance(m, DescriptorMsg):
            self._on_descriptor(m, t)
        elif isinstance(m, CloudRequestMsg):
            if m.target == self.id:
                self._on_request(m, t)
        elif isinstance(m, CloudMsg):
            self._on_cloud(m)
        elif isinstance(m, LoopMsg):
            self._on_loop(m)
        elif isinstance(m, PoseUpdateMsg):
            known = self.partner_poses[m.sender]
            for k, p in m.poses:
                known[k] = p
            self._rows.pop(m.sender, None)
            # cached PCM scores keep the partner odometry they were computed with
            self.partner_dirty.add(m.sender)
        return False

    def _on_descriptor(self, m: DescriptorMsg, t: float) -> None:
        self.partner_poses[m.sender][m.keyframe] = m.pose
        self._rows.pop(m.sender, None)
        self.partner_dirty.add(m.sender)
        hits = self.tree.query(m.descriptor(), self.cfg.max_tree_distance, self.cfg.tree_neighbors)
        if not hits:
            return
        key = (m.sender, m.keyframe)
        self.stats["descriptor_hits"] += 1
        self.matches[key].extend(int(k) for k, _ in hits)
        if key in self.cloud_cache:
            self._process_matches(key)
        elif key not in self.requested:
            self.requested.add(key)
            self._send(CloudRequestMsg(self.id, m.sender, m.keyframe), t)

    def _on_request(self, m: CloudRequestMsg, t: float) -> None:
        if m.keyframe >= len(self.keyframes):
            raise KeyError(f"no keyframe {m.keyframe}")
        pts = self.keyframes[m.keyframe].points
        payload = pts
        if self.flags.compression:
            try:
                payload = codec.compress(pts, self.cfg.compression_resolution)
            except codec.CodecOverflowError:
                self.stats["compression_overflow"] += 1
        self._send(CloudMsg(self.id, m.keyframe, payload), t)

    def _on_cloud(self, m: CloudMsg) -> None:
        key = (m.sender, m.keyframe)
        if key not in self.requested:
            return
        self.cloud_cache[key] = m.points()
        self._process_matches(key)

    def _process_matches(self, key: Key) -> None:
        partner, kb = key
        pts_b = self.cloud_cache[key]
        img_b = make_scene_image(pts_b, max_range=self.cfg.sonar.max_range)
        for ka in self.matches.pop(key, []):
            own = self.keyframes[ka]
            self.stats["ir_attempts"] += 1
            pre = gate_pre(len(own.points), len(pts_b), own.image, img_b, self.cfg.gates,
                           use_scene_image=self.flags.use_scene_image)
            if not pre:
                self.stats[f"ir_gate_{pre.reason.value}"] += 1
                continue
            try:
                res = global_register(pts_b, own.points)
                ovl = overlap(pts_b, own.points, res.transform)
            except (DegenerateRegistrationError, ValueError) as exc:
                log.info("robot %d: registration with %s failed: %s", self.id, key, exc)
                self.stats["ir_registration_failed"] += 1
                continue
            post = gate_post(ovl, self.cfg.gates)
            if not post:
                self.stats["ir_gate_overlap"] += 1
                continue
            cand = LoopCandidate(self.key(ka), key, res.transform, self.registration_cov(res.rmse), ovl, res.rmse)
            self._pool(partner).add(cand)
            self.ir_dirty.add(partner)
            self.stats["ir_candidates"] += 1

    def _on_loop(self, m: LoopMsg) -> None:
        if m.dst[0] != self.id:
            return
        cand = LoopCandidate(m.src, m.dst, m.transform, np.diag(np.asarray(m.cov_diag, dtype=np.float64)))
        cand = cand.oriented(self.id)
        self.announced.add(cand.ident)
        if self._pool(m.sender).add(cand):
            self.ir_dirty.add(m.sender)

    def _pool(self, partner: int) -> PcmPool:
        if partner not in self.ir_pools:
            self.ir_pools[partner] = PcmPool(self.cfg.gates.pcm_threshold, self.cfg.ir_min_clique)
        return self.ir_pools[partner]

    # -- partner trajectories ------------------------------------------------

    def _refresh_partners(self, t: float) -> bool:
        changed = False
        for partner in sorted(self.ir_dirty | (self.partner_dirty & set(self.accepted_ir))):
            changed |= self._refresh_partner(partner, t)
        self.ir_dirty.clear()
        self.partner_dirty.clear()
        return changed

    def _refresh_partner(self, partner: int, t: float) -> bool:
        pool = self._pool(partner)
        if self.flags.use_pcm:
            chosen = pool.select(self.odometry)
        else:
            chosen = list(pool.candidates)
        g = self.graph
        g.remove_factors(FactorKind.IR, partner)
        g.remove_factors(FactorKind.PR, partner)
        if not chosen:
            for k in g.keys_of(partner):
                del g.poses[k]
            self.accepted_ir.pop(partner, None)
            return True
        # partner poses with no estimate yet are seeded from the IR links
        for c in chosen:
            add_factor(g, Factor(FactorKind.IR, [c.src, c.dst], c.relative, c.covariance))
        self._add_partner_chain(partner)
        for k in g.keys_of(partner):
            if k[1] not in self.partner_poses[partner]:
                del g.poses[k]
        self.accepted_ir[partner] = chosen
        for c in chosen:
            if c.ident not in self.announced and c.src[0] == self.id:
                cd = np.diag(c.covariance)
                self._send(LoopMsg(c.src, c.dst, f32_pose(c.relative), (f32(cd[0]), f32(cd[1]), f32(cd[2]))), t)
                self.announced.add(c.ident)
        return True

    def _add_partner_chain(self, partner: int) -> None:
        known = self.partner_poses[partner]
        kfs = sorted(known)
        links = list(zip(kfs[:-1], kfs[1:]))
        g = self.graph
        progress = True
        while links and progress:
            progress = False
            rest = []
            for a, b in links:
                ka, kb = (partner, a), (partner, b)
                if ka in g.poses or kb in g.poses:
                    add_factor(g, Factor(FactorKind.PR, [ka, kb], between(known[a], known[b]), self.partner_cov))
                    progress = True
                else:
                    rest.append((a, b))
            links = rest

    # -- pose re-send --------------------------------------------------------

    def _maybe_resend(self, t: float) -> None:
        if not self.flags.resend:
            return
        own = {k[1]: p for k, p in self.graph.poses.items() if k[0] == self.id}
        thr_t, thr_r = self.cfg.resend_threshold
        moved = changed_poses(self.sent_poses, own, thr_t, math.radians(thr_r))
        if not moved:
            return
        poses = tuple((k, f32_pose(p)) for k, p in moved)
        self._send(PoseUpdateMsg(self.id, poses), t)
        for k, p in poses:
            self.sent_poses[k] = p

    # -- reporting -----------------------------------------------------------

    def ir_factor_keys(self, partner: Optional[int] = None) -> list[Key]:
        """Partner keyframes that are endpoints of accepted IR factors."""
        out = set()
        for f in self.graph.factors:
            if f.kind is FactorKind.IR:
                for k in f.keys:
                    if k[0] != self.id and (partner is None or k[0] == partner):
                        out.add(k)
        return sorted(out)

    def n_ir_factors(self) -> int:
        return sum(1 for f in self.graph.factors if f.kind is FactorKind.IR)
