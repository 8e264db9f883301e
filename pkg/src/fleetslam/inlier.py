"""Loop-closure outlier rejection: pre-registration gates, the overlap
gate, and pairwise consistency maximisation (PCM) via maximum clique."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .geometry import Pose2, Transform2, adjoint, between, compose, inverse, log
from .place import SceneImage, scene_sad

# chi-square, 3 DOF, 0.99 quantile
CHI2_3DOF_99 = 11.344866730144373

Key = tuple[int, int]  # (robot id, keyframe id)
MAX_PCM_CANDIDATES = 200


class GateReason(str, Enum):
    PASS = "pass"
    MIN_POINTS = "min_points"
    RATIO = "ratio"
    SAD = "sad"
    OVERLAP = "overlap"


@dataclass(frozen=True)
class GateConfig:
    min_points: int = 75
    max_ratio: float = 2.0
    max_sad: float = 0.8
    min_overlap: float = 0.55
    pcm_threshold: float = CHI2_3DOF_99

    def __post_init__(self) -> None:
        if self.min_points <= 0 or self.max_ratio <= 0 or self.max_sad <= 0 or self.pcm_threshold <= 0:
            raise ValueError("gate thresholds must be positive")
        if not 0.0 < self.min_overlap <= 1.0:
            raise ValueError("min_overlap must lie in (0, 1]")


@dataclass(frozen=True)
class GateResult:
    passed: bool
    reason: GateReason

    def __bool__(self) -> bool:
        return self.passed


def gate_pre(
    n_src: int,
    n_dst: int,
    src_img: Optional[SceneImage],
    dst_img: Optional[SceneImage],
    cfg: GateConfig,
    use_scene_image: bool = True,
) -> GateResult:
    """Checks made before a registration is attempted.

    Point counts, then the point ratio, then the scene image SAD. All three
    are independent so the outcome does not depend on the order.
    """
    if n_src < cfg.min_points or n_dst < cfg.min_points:
        return GateResult(False, GateReason.MIN_POINTS)
    if max(n_src, n_dst) / min(n_src, n_dst) > cfg.max_ratio:
        return GateResult(False, GateReason.RATIO)
    if use_scene_image and src_img is not None and dst_img is not None:
        if scene_sad(src_img, dst_img) > cfg.max_sad:
            return GateResult(False, GateReason.SAD)
    return GateResult(True, GateReason.PASS)


def gate_post(ovl: float, cfg: GateConfig) -> GateResult:
    if ovl >= cfg.min_overlap:
        return GateResult(True, GateReason.PASS)
    return GateResult(False, GateReason.OVERLAP)


@dataclass
class LoopCandidate:
    """A registered loop closure: ``relative`` is ``between(src, dst)``."""

    src: Key
    dst: Key
    relative: Transform2
    covariance: np.ndarray
    overlap: float = 1.0
    rmse: float = 0.0

    def __post_init__(self) -> None:
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        if self.src == self.dst:
            raise ValueError("loop endpoints must differ")
        check_spd(self.covariance)

    @property
    def ident(self) -> tuple[Key, Key]:
        return (self.src, self.dst)

    def oriented(self, robot_a: int) -> "LoopCandidate":
        """The same constraint with ``src`` on ``robot_a``."""
        if self.src[0] == robot_a:
            return self
        inv = inverse(self.relative)
        ad = adjoint(self.relative)
        cov = ad @ self.covariance @ ad.T
        return LoopCandidate(self.dst, self.src, inv, 0.5 * (cov + cov.T), self.overlap, self.rmse)


class NotSPDError(ValueError):
    pass


def check_spd(cov: np.ndarray) -> None:
    """Raise :class:`NotSPDError` unless ``cov`` is a symmetric positive-definite 3x3."""
    c = np.asarray(cov)
    if c.shape != (3, 3) or float(np.abs(c - c.T).max()) > 1e-12 * max(1.0, float(np.abs(c).max())):
        raise NotSPDError("covariance must be a symmetric 3x3 matrix")
    # leading principal minors (Sylvester)
    m1 = c[0, 0]
    m2 = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    if not (m1 > 0 and m2 > 0 and np.linalg.det(c) > 0):
        raise NotSPDError("covariance is not positive definite")


@dataclass(frozen=True)
class RelativeEstimate:
    """Relative pose between two keyframes of one robot with its covariance."""

    transform: Transform2
    covariance: np.ndarray


def reverse_estimate(est: RelativeEstimate) -> RelativeEstimate:
    """The same relative estimate read in the opposite direction."""
    ad = adjoint(est.transform)
    cov = ad @ np.asarray(est.covariance) @ ad.T
    return RelativeEstimate(inverse(est.transform), 0.5 * (cov + cov.T))


def pairwise_consistency(
    l1: LoopCandidate,
    l2: LoopCandidate,
    odo_a: RelativeEstimate,
    odo_b: RelativeEstimate,
) -> float:
    """Squared Mahalanobis norm of the loop cycle residual.

    The cycle is ``inv(z1) * odo_a * z2 * inv(odo_b)`` where ``odo_a`` runs
    from ``l1.src`` to ``l2.src`` and ``odo_b`` from ``l1.dst`` to
    ``l2.dst``. Noise on each factor is propagated to the cycle's right
    tangent space with adjoints (first order).

    First-order propagation depends slightly on which loop opens the cycle,
    so the pair is always evaluated with the lower ``ident`` first; the
    odometry is reversed exactly when the arguments come the other way.
    This makes the score symmetric in ``l1`` and ``l2``.
    """
    for cov in (l1.covariance, l2.covariance, odo_a.covariance, odo_b.covariance):
        check_spd(np.asarray(cov))
    if l2.ident < l1.ident:
        l1, l2 = l2, l1
        odo_a, odo_b = reverse_estimate(odo_a), reverse_estimate(odo_b)
    z1, z2 = l1.relative, l2.relative
    pieces = [
        (inverse(z1), adjoint(z1) @ l1.covariance @ adjoint(z1).T),
        (odo_a.transform, np.asarray(odo_a.covariance)),
        (z2, l2.covariance),
        (inverse(odo_b.transform), adjoint(odo_b.transform) @ odo_b.covariance @ adjoint(odo_b.transform).T),
    ]
    cycle = Pose2()
    for p, _ in pieces:
        cycle = compose(cycle, p)
    e = log(cycle)

    sigma = np.zeros((3, 3))
    suffix = Pose2()
    for p, cov in reversed(pieces):
        ad = adjoint(inverse(suffix))
        sigma += ad @ cov @ ad.T
        suffix = compose(p, suffix)
    return float(e @ np.linalg.solve(sigma, e))


OdometryFn = Callable[[Key, Key], RelativeEstimate]


def chain_estimate(poses: Sequence[Pose2] | np.ndarray, step_covariance: np.ndarray) -> RelativeEstimate:
    """Relative pose from ``poses[0]`` to ``poses[-1]`` through the chain.

    Each link ``between(poses[i], poses[i + 1])`` carries ``step_covariance``
    in its own right tangent space; links are transported to the end frame
    with adjoints and summed (first order).

    Args:
        poses: Pose2 sequence or ``(N, 3)`` array of ``(x, y, theta)`` rows.
    """
    arr = poses if isinstance(poses, np.ndarray) else np.array([p.as_array() for p in poses]).reshape(-1, 3)
    q = np.asarray(step_covariance, dtype=np.float64)
    if len(arr) < 2:
        return RelativeEstimate(Pose2(), q * 1e-9)
    start, end = Pose2(*arr[0]), Pose2(*arr[-1])
    mid = arr[1:-1]
    sigma = q.copy()
    if len(mid):
        # Ad(between(end, p)) for every interior pose
        c, s = math.cos(end.theta), math.sin(end.theta)
        dx, dy = mid[:, 0] - end.x, mid[:, 1] - end.y
        x, y = c * dx + s * dy, -s * dx + c * dy
        th = mid[:, 2] - end.theta
        ct, st = np.cos(th), np.sin(th)
        ad = np.zeros((len(mid), 3, 3))
        ad[:, 0, 0], ad[:, 0, 1], ad[:, 0, 2] = ct, -st, y
        ad[:, 1, 0], ad[:, 1, 1], ad[:, 1, 2] = st, ct, -x
        ad[:, 2, 2] = 1.0
        sigma += np.einsum("mij,jk,mlk->il", ad, q, ad)
    return RelativeEstimate(between(start, end), 0.5 * (sigma + sigma.T))


def consistency_matrix(candidates: Sequence[LoopCandidate], odometry: OdometryFn) -> np.ndarray:
    """Symmetric matrix of pairwise consistency scores (diagonal zero).

    ``odometry(a, b)`` returns the relative estimate between two keyframes
    of the same robot.
    """
    n = len(candidates)
    d = np.zeros((n, n))
    if n == 0:
        return d
    robot_a = candidates[0].src[0]
    oriented = [c.oriented(robot_a) for c in candidates]
    for i, j in itertools.combinations(range(n), 2):
        li, lj = oriented[i], oriented[j]
        if li.src[0] != lj.src[0] or li.dst[0] != lj.dst[0]:
            raise ValueError("PCM candidates must share one ordered robot pair")
        d[i, j] = d[j, i] = pairwise_consistency(li, lj, odometry(li.src, lj.src), odometry(li.dst, lj.dst))
    return d


def maximum_cliques(adj: Sequence[set[int]]) -> list[frozenset[int]]:
    """Every clique of maximum size, via Bron-Kerbosch with Tomita pivoting.

    Branches that cannot reach the best size found so far are pruned; ties
    with the best size are kept.
    """
    out: list[frozenset[int]] = []
    best = 0

    def expand(r: set[int], p: set[int], x: set[int]) -> None:
        nonlocal best, out
        if len(r) + len(p) < best:
            return
        if not p and not x:
            if len(r) > best:
                best, out = len(r), []
            out.append(frozenset(r))
            return
        pivot = max(p | x, key=lambda u: (len(adj[u] & p), -u))
        for v in sorted(p - adj[pivot]):
            expand(r | {v}, p & adj[v], x & adj[v])
            p = p - {v}
            x = x | {v}

    if len(adj):
        expand(set(), set(range(len(adj))), set())
    return out


def best_clique(
    cliques: Sequence[frozenset[int]],
    dist: np.ndarray,
    idents: Sequence[Hashable],
) -> list[int]:
    """Largest clique; ties by lower summed pairwise score, then sorted ids."""
    if not cliques:
        return []

    def rank(c: frozenset[int]) -> tuple:
        members = sorted(c)
        total = sum(dist[i, j] for i, j in itertools.combinations(members, 2))
        return (-len(members), total, sorted(idents[i] for i in members))

    return sorted(min(cliques, key=rank))


def pcm_select(
    candidates: Sequence[LoopCandidate],
    odometry: OdometryFn,
    threshold: float = CHI2_3DOF_99,
) -> list[LoopCandidate]:
    """Largest pairwise-consistent subset of ``candidates``."""
    if not candidates:
        return []
    return select_from_matrix(candidates, consistency_matrix(candidates, odometry), threshold)


def select_from_matrix(
    candidates: Sequence[LoopCandidate],
    dist: np.ndarray,
    threshold: float = CHI2_3DOF_99,
) -> list[LoopCandidate]:
    """Maximum clique of the graph with an edge wherever ``dist <= threshold``."""
    n = len(candidates)
    if n == 0:
        return []
    if n > MAX_PCM_CANDIDATES:
        raise ValueError(f"PCM is limited to {MAX_PCM_CANDIDATES} candidates")
    adj = [set(int(j) for j in np.flatnonzero(dist[i] <= threshold) if j != i) for i in range(n)]
    chosen = best_clique(maximum_cliques(adj), dist, [c.ident for c in candidates])
    return [candidates[i] for i in chosen]


def chain_odometry(
    trajectories: Mapping[int, Mapping[int, Pose2]],
    step_covariance: Mapping[int, np.ndarray] | np.ndarray,
) -> OdometryFn:
    """Odometry lookup from per-robot pose tables.

    The covariance of a relative estimate between keyframes ``i`` and ``j``
    is ``|i - j|`` times the per-step covariance of that robot.
    """

    def lookup(a: Key, b: Key) -> RelativeEstimate:
        if a[0] != b[0]:
            raise ValueError("odometry endpoints must be on one robot")
        poses = trajectories[a[0]]
        step = step_covariance[a[0]] if isinstance(step_covariance, Mapping) else step_covariance
        steps = max(abs(b[1] - a[1]), 1)
        return RelativeEstimate(between(poses[a[1]], poses[b[1]]), steps * np.asarray(step))

    return lookup


@dataclass
class PcmPool:
    """Candidates for one robot pair (or one robot, for intra-robot loops).

    Pairwise scores are cached; call :meth:`invalidate` when the odometry
    they were computed from changes.
    """

    threshold: float = CHI2_3DOF_99
    min_clique: int = 1
    candidates: list[LoopCandidate] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def add(self, c: LoopCandidate) -> bool:
        if any(c.ident == o.ident or c.ident == (o.dst, o.src) for o in self.candidates):
            return False
        if len(self.candidates) >= MAX_PCM_CANDIDATES:
            return False
        self.candidates.append(c)
        return True

    def invalidate(self) -> None:
        self._cache.clear()

    def matrix(self, odometry: OdometryFn) -> np.ndarray:
        n = len(self.candidates)
        d = np.zeros((n, n))
        if n == 0:
            return d
        robot_a = self.candidates[0].src[0]
        oriented = [c.oriented(robot_a) for c in self.candidates]
        for i, j in itertools.combinations(range(n), 2):
            key = (oriented[i].ident, oriented[j].ident)
            if key not in self._cache:
                li, lj = oriented[i], oriented[j]
                self._cache[key] = pairwise_consistency(
                    li, lj, odometry(li.src, lj.src), odometry(li.dst, lj.dst)
                )
            d[i, j] = d[j, i] = self._cache[key]
        return d

    def select(self, odometry: OdometryFn) -> list[LoopCandidate]:
        chosen = select_from_matrix(self.candidates, self.matrix(odometry), self.threshold)
        return chosen if len(chosen) >= self.min_clique else []
