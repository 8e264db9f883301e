"""Rigid 2D point cloud registration.

``icp`` is point-to-point ICP with radius-limited nearest-neighbour
association and a closed-form Procrustes step. ``global_register`` needs no
initial guess: both clouds are mean-centred, a fixed lattice of rotations is
scored with short ICP runs, and the best starts are refined with full ICP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate
from scipy.spatial import cKDTree

from .geometry import CloudLike, Pose2, Transform2, as_points, compose, compose_arrays, transform_points

DEFAULT_MATCH_RADIUS = 2.0
DEFAULT_MAX_ITER = 50
CONVERGENCE_TOL = 1e-6
N_ROTATION_STARTS = 64
TRIM_FRACTION = 0.7
SHORT_ICP_ITERS = 10
COARSE_RADIUS = 1.0
REFINE_RADII = (1.0, 0.5)
N_REFINE = 8
VOTE_CELL = 0.5
OVERLAP_RADIUS = 0.5


class DegenerateRegistrationError(RuntimeError):
    """Too few correspondences to determine a rigid transform."""


@dataclass
class RegistrationResult:
    transform: Transform2
    rmse: float
    iterations: int
    converged: bool
    # truncated objective mean(min(d^2, r^2)) at every visited iterate
    objective: list[float] = field(default_factory=list)
    score: float = float("nan")
    stage_objectives: list[list[float]] = field(default_factory=list)


def procrustes(src: np.ndarray, dst: np.ndarray) -> Pose2:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)  # 2x2 cross-covariance
    theta = math.atan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    c, s = math.cos(theta), math.sin(theta)
    tx = dc[0] - (c * sc[0] - s * sc[1])
    ty = dc[1] - (s * sc[0] + c * sc[1])
    return Pose2(tx, ty, theta)


def _step_size(a: Pose2, b: Pose2) -> float:
    return max(abs(a.x - b.x), abs(a.y - b.y), abs(math.remainder(a.theta - b.theta, 2 * math.pi)))


def icp(
    source: CloudLike,
    target: CloudLike,
    init: Transform2 = Pose2(),
    max_iter: int = DEFAULT_MAX_ITER,
    match_radius: float = DEFAULT_MATCH_RADIUS,
    tol: float = CONVERGENCE_TOL,
    target_tree: cKDTree | None = None,
) -> RegistrationResult:
    """Align ``source`` onto ``target`` starting from ``init``.

    The returned transform maps source coordinates into the target frame.

    Raises:
        ValueError: if either cloud is empty.
        DegenerateRegistrationError: if fewer than 3 pairs match at any
            iteration.
    """
    src = as_points(source)
    dst = as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp needs two non-empty clouds")
    tree = target_tree if target_tree is not None else cKDTree(dst)
    r2 = match_radius * match_radius

    def associate(T: Pose2) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        moved = transform_points(T, src)
        d, j = tree.query(moved, distance_upper_bound=match_radius)
        matched = d <= match_radius
        n = int(np.count_nonzero(matched))
        if n < 3:
            raise DegenerateRegistrationError(f"only {n} matched pairs")
        d2 = np.where(matched, d * d, r2)
        history.append(float(d2.mean()))
        return moved, d, j, matched

    T = init
    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        moved, _, j, matched = associate(T)
        # solve for the increment in the target frame, then apply it on top of T
        T_new = compose(procrustes(moved[matched], dst[j[matched]]), T)
        step = _step_size(T, T_new)
        T = T_new
        if step < tol:
            converged = True
            break

    _, d, _, matched = associate(T)
    rmse = float(np.sqrt(np.mean(d[matched] ** 2)))
    return RegistrationResult(T, rmse, iterations, converged, history)


def staged_icp(
    source: CloudLike,
    target: CloudLike,
    init: Transform2 = Pose2(),
    radii: Sequence[float] = REFINE_RADII,
    max_iter: int = DEFAULT_MAX_ITER,
    target_tree: cKDTree | None = None,
) -> RegistrationResult:
    """:func:`icp` repeated with a shrinking match radius, each stage seeded by the last.

    Wide radii pull a rough guess into the basin; narrow ones stop distant
    mismatches from biasing the final estimate. The result is that of the
    last stage, with every stage's objective history in ``stage_objectives``.
    """
    if len(radii) == 0:
        raise ValueError("staged_icp needs at least one radius")
    tree = target_tree if target_tree is not None else cKDTree(as_points(target))
    T, stages = init, []
    for radius in radii:
        res = icp(source, target, T, max_iter, radius, target_tree=tree)
        stages.append(res.objective)
        T = res.transform
    res.stage_objectives = stages
    return res


def trimmed_rmse(moved: np.ndarray, tree: cKDTree, trim: float = TRIM_FRACTION) -> float:
    """RMSE over the best ``trim`` fraction of nearest-neighbour distances."""
    d, _ = tree.query(moved)
    keep = max(1, int(math.ceil(trim * len(d))))
    best = np.partition(d, keep - 1)[:keep]
    return float(np.sqrt(np.mean(best**2)))


def rotation_lattice(n: int = N_ROTATION_STARTS) -> np.ndarray:
    return -math.pi + 2.0 * math.pi * np.arange(n) / n


def translation_seed(src: np.ndarray, dst: np.ndarray, cell: float = VOTE_CELL) -> np.ndarray:
    """Most-voted translation over all pairwise differences ``dst_j - src_i``.

    Votes are binned on a ``cell`` grid and smoothed with a 3x3 box; the
    first maximal bin (row-major) wins. The seed is the mean of the
    differences that voted inside that box, so it is not snapped to a bin
    centre.
    """
    diff = (dst[None, :, :] - src[:, None, :]).reshape(-1, 2)
    lim = float(np.abs(diff).max()) + cell
    n = int(math.ceil(2.0 * lim / cell)) + 1
    ij = np.floor((diff + lim) / cell).astype(np.int64)
    votes = np.bincount(ij[:, 0] * n + ij[:, 1], minlength=n * n).reshape(n, n)
    box = correlate(votes, np.ones((3, 3), dtype=votes.dtype), mode="constant")
    i, j = divmod(int(np.argmax(box)), n)
    inside = (np.abs(ij[:, 0] - i) <= 1) & (np.abs(ij[:, 1] - j) <= 1)
    return diff[inside].mean(axis=0)


def _transform_batch(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply each row of ``T`` ``(K, 3)`` to ``pts`` ``(N, 2)``; returns ``(K, N, 2)``."""
    c, s = np.cos(T[:, 2])[:, None], np.sin(T[:, 2])[:, None]
    x, y = pts[None, :, 0], pts[None, :, 1]
    return np.stack([c * x - s * y + T[:, 0:1], s * x + c * y + T[:, 1:2]], axis=-1)


def batched_icp(
    src: np.ndarray,
    dst: np.ndarray,
    inits: np.ndarray,
    max_iter: int,
    match_radius: float,
    tree: cKDTree,
    tol: float = CONVERGENCE_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Run :func:`icp` from many starts at once.

    Each start follows exactly the per-start rules of :func:`icp`; only the
    nearest-neighbour queries and the closed-form solves are batched.

    Returns:
        ``(T, valid)``: final transforms ``(K, 3)`` and a mask that is false
        where :func:`icp` would have raised a degenerate-registration error.
    """
    T = np.array(inits, dtype=np.float64).reshape(-1, 3)
    k_all = len(T)
    valid = np.ones(k_all, dtype=bool)
    active = np.ones(k_all, dtype=bool)

    def associate(rows: np.ndarray):
        moved = _transform_batch(T[rows], src)
        d, j = tree.query(moved.reshape(-1, 2), distance_upper_bound=match_radius)
        d, j = d.reshape(len(rows), -1), j.reshape(len(rows), -1)
        m = d <= match_radius
        ok = m.sum(axis=1) >= 3
        valid[rows[~ok]] = False
        return moved[ok], j[ok], m[ok], rows[ok]

    for _ in range(max_iter):
        rows = np.flatnonzero(active & valid)
        if len(rows) == 0:
            break
        moved, j, m, rows = associate(rows)
        if len(rows) == 0:
            break
        w = m[..., None].astype(np.float64)
        cnt = w.sum(axis=1)
        q = dst[np.minimum(j, len(dst) - 1)]
        ps = (moved * w).sum(axis=1) / cnt
        qs = (q * w).sum(axis=1) / cnt
        pc = (moved - ps[:, None, :]) * w
        qc = q - qs[:, None, :]
        h = np.einsum("kna,knb->kab", pc, qc)
        theta = np.arctan2(h[:, 0, 1] - h[:, 1, 0], h[:, 0, 0] + h[:, 1, 1])
        c, s = np.cos(theta), np.sin(theta)
        inc = np.column_stack([
            qs[:, 0] - (c * ps[:, 0] - s * ps[:, 1]),
            qs[:, 1] - (s * ps[:, 0] + c * ps[:, 1]),
            theta,
        ])
        new = compose_arrays(inc, T[rows])
        diff = np.abs(new - T[rows])
        diff[:, 2] = np.abs(np.remainder(new[:, 2] - T[rows, 2] + math.pi, 2 * math.pi) - math.pi)
        T[rows] = new
        active[rows[diff.max(axis=1) < tol]] = False

    rows = np.flatnonzero(valid)
    if len(rows):
        associate(rows)
    return T, valid


def batched_trimmed_rmse(T: np.ndarray, src: np.ndarray, tree: cKDTree, trim: float = TRIM_FRACTION) -> np.ndarray:
    """:func:`trimmed_rmse` of ``src`` under every row of ``T``."""
    moved = _transform_batch(T, src)
    d, _ = tree.query(moved.reshape(-1, 2))
    d = d.reshape(len(T), -1)
    keep = max(1, int(math.ceil(trim * d.shape[1])))
    best = np.partition(d, keep - 1, axis=1)[:, :keep]
    return np.sqrt(np.mean(best**2, axis=1))


def global_register(
    source: CloudLike,
    target: CloudLike,
    n_starts: int = N_ROTATION_STARTS,
    trim: float = TRIM_FRACTION,
    short_iters: int = SHORT_ICP_ITERS,
    coarse_radius: float = COARSE_RADIUS,
    refine_radii: tuple[float, ...] = REFINE_RADII,
    n_refine: int = N_REFINE,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RegistrationResult:
    """Register two clouds without an initial guess.

    Both clouds are mean-centred. Every rotation of a fixed lattice gets a
    translation seed from pairwise-difference voting, a short ICP run and a
    trimmed-RMSE score. The ``n_refine`` best starts are refined with full
    ICP over ``refine_radii`` and the lowest trimmed RMSE wins. All
    reductions break ties by lattice index, so results are deterministic.
    """
    src = as_points(source)
    dst = as_points(target)
    if len(src) < 10 or len(dst) < 10:
        raise ValueError("global registration needs at least 10 points per cloud")
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    src_c, dst_c = src - sc, dst - dc
    tree = cKDTree(dst_c)

    lattice = rotation_lattice(n_starts)
    inits = np.zeros((n_starts, 3))
    for k, theta in enumerate(lattice):
        inits[k, :2] = translation_seed(transform_points(Pose2(0.0, 0.0, theta), src_c), dst_c)
        inits[k, 2] = theta
    T_short, ok = batched_icp(src_c, dst_c, inits, short_iters, coarse_radius, tree)
    if not ok.any():
        raise DegenerateRegistrationError("no rotation start produced a valid alignment")
    ks = np.flatnonzero(ok)
    scores = batched_trimmed_rmse(T_short[ks], src_c, tree, trim)
    starts = sorted(
        (float(sc_k), int(k), Pose2(*T_short[k])) for sc_k, k in zip(scores, ks)
    )

    best: tuple[float, RegistrationResult] | None = None
    for _, _, T in starts[:n_refine]:
        try:
            res = staged_icp(src_c, dst_c, T, refine_radii, max_iter, target_tree=tree)
        except DegenerateRegistrationError:
            continue
        score = trimmed_rmse(transform_points(res.transform, src_c), tree, trim)
        if best is None or score < best[0]:
            best = (score, res)
    if best is None:
        raise DegenerateRegistrationError("refinement failed for every start")

    score, refined = best
    # undo the centring: q = R (p - sc) + t + dc
    Tc = refined.transform
    t = Tc.translation - Tc.rotation() @ sc + dc
    refined.transform = Pose2(t[0], t[1], Tc.theta)
    refined.score = score
    return refined


def overlap(source: CloudLike, target: CloudLike, t: Transform2, radius: float = OVERLAP_RADIUS) -> float:
    """Fraction of transformed source points with a target neighbour within ``radius``."""
    src = as_points(source)
    dst = as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("overlap needs two non-empty clouds")
    d, _ = cKDTree(dst).query(transform_points(t, src), distance_upper_bound=radius)
    return float(np.count_nonzero(d <= radius)) / len(src)
