"""Per-robot SE(2) factor graph and a batch Levenberg-Marquardt solver.

Residual of a binary factor with measurement ``Z`` between poses ``Xi`` and
``Xj`` is ``Log(Z^-1 * Xi^-1 * Xj)``; a prior uses ``Log(Z^-1 * X)``. Updates
are additive on ``(x, y, theta)``, and Jacobians are analytic.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, TextIO

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Pose2, Transform2, compose, inverse, wrap_angle, wrap_angles

Key = tuple[int, int]  # (robot id, keyframe id)

ODOM_SIGMA = (0.05, 0.05, math.radians(1.0))
MAX_ITERATIONS = 100
REL_TOL = 1e-9


class FactorKind(str, Enum):
    PRIOR = "prior"
    ODOM = "odom"
    SSM = "ssm"
    NSSM = "nssm"
    IR = "ir"
    PR = "pr"


class DuplicateFactorError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    """The normal equations have no unique solution (gauge not fixed)."""


def diag_cov(sigmas: Sequence[float]) -> np.ndarray:
    return np.diag(np.square(np.asarray(sigmas, dtype=np.float64)))


@dataclass
class Factor:
    kind: FactorKind
    keys: tuple[Key, ...]
    measurement: Transform2
    covariance: np.ndarray

    def __post_init__(self) -> None:
        self.kind = FactorKind(self.kind)
        self.keys = tuple((int(k[0]), int(k[1])) for k in self.keys)
        want = 1 if self.kind is FactorKind.PRIOR else 2
        if len(self.keys) != want:
            raise ValueError(f"{self.kind.value} factor needs {want} endpoint(s)")
        if want == 2 and self.keys[0] == self.keys[1]:
            raise ValueError("binary factor endpoints must differ")
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("factor covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("factor covariance must be positive definite") from exc
        self.covariance = cov
        # whitening matrix W with W^T W = cov^-1
        self.sqrt_info = np.linalg.inv(chol)

    @property
    def signature(self) -> tuple:
        m = self.measurement
        return (self.kind, self.keys, round(m.x, 9), round(m.y, 9), round(m.theta, 9))


@dataclass(frozen=True)
class KeyframePolicy:
    min_translation: float = 2.0
    min_rotation: float = math.radians(30.0)

    def __post_init__(self) -> None:
        if self.min_translation <= 0 or self.min_rotation <= 0:
            raise ValueError("keyframe thresholds must be positive")


def maybe_add_keyframe(delta: Transform2, policy: KeyframePolicy = KeyframePolicy()) -> bool:
    return math.hypot(delta.x, delta.y) >= policy.min_translation or abs(delta.theta) >= policy.min_rotation


@dataclass
class GraphState:
    own_robot: int
    poses: dict[Key, Pose2] = field(default_factory=dict)
    factors: list[Factor] = field(default_factory=list)
    _signatures: set = field(default_factory=set, repr=False)

    def has_prior(self) -> bool:
        return any(f.kind is FactorKind.PRIOR for f in self.factors)

    def keys_of(self, robot: int) -> list[Key]:
        return sorted(k for k in self.poses if k[0] == robot)

    def robots(self) -> list[int]:
        return sorted({k[0] for k in self.poses})

    def remove_factors(self, kind: FactorKind, robot: Optional[int] = None) -> int:
        """Drop factors of ``kind`` (touching ``robot`` if given); returns the count."""
        keep, dropped = [], 0
        for f in self.factors:
            hit = f.kind is kind and (robot is None or any(k[0] == robot for k in f.keys))
            if hit:
                self._signatures.discard(f.signature)
                dropped += 1
            else:
                keep.append(f)
        self.factors = keep
        return dropped

    def copy(self) -> "GraphState":
        g = GraphState(self.own_robot, dict(self.poses), list(self.factors))
        g._signatures = set(self._signatures)
        return g


def add_factor(g: GraphState, f: Factor) -> GraphState:
    """Append ``f``, creating a missing endpoint from its neighbour and ``f``.

    Raises:
        DuplicateFactorError: if an identical factor is already present.
        KeyError: if neither endpoint of a binary factor has a pose.
    """
    sig = f.signature
    if sig in g._signatures:
        raise DuplicateFactorError(f"duplicate {f.kind.value} factor on {f.keys}")
    if f.kind is FactorKind.PRIOR:
        if g.has_prior():
            raise ValueError("graph already has a prior factor")
        g.poses.setdefault(f.keys[0], f.measurement)
    else:
        a, b = f.keys
        if a in g.poses and b not in g.poses:
            g.poses[b] = compose(g.poses[a], f.measurement)
        elif b in g.poses and a not in g.poses:
            g.poses[a] = compose(g.poses[b], inverse(f.measurement))
        elif a not in g.poses and b not in g.poses:
            raise KeyError(f"neither endpoint of {f.keys} has a pose estimate")
    g.factors.append(f)
    g._signatures.add(sig)
    return g


# -- residuals and Jacobians -------------------------------------------------


def _log_jacobian(e: np.ndarray) -> np.ndarray:
    """d Log(e) / d(ex, ey, etheta) for ``(N, 3)`` plain pose arrays."""
    t = e[:, 2]
    half = 0.5 * t
    small = np.abs(t) < 1e-4
    sh = np.where(small, 1.0, half)
    cot = np.cos(sh) / np.sin(sh)
    a = np.where(small, 1.0 - t * t / 12.0, sh * cot)
    da = np.where(small, -t / 6.0, 0.5 * cot - 0.5 * sh / np.sin(sh) ** 2)
    J = np.zeros((len(e), 3, 3))
    J[:, 0, 0] = a
    J[:, 0, 1] = half
    J[:, 0, 2] = da * e[:, 0] + 0.5 * e[:, 1]
    J[:, 1, 0] = -half
    J[:, 1, 1] = a
    J[:, 1, 2] = -0.5 * e[:, 0] + da * e[:, 1]
    J[:, 2, 2] = 1.0
    return J


def _log_rows(e: np.ndarray) -> np.ndarray:
    t = e[:, 2]
    half = 0.5 * t
    small = np.abs(t) < 1e-4
    sh = np.where(small, 1.0, half)
    a = np.where(small, 1.0 - t * t / 12.0, sh * np.cos(sh) / np.sin(sh))
    return np.column_stack([a * e[:, 0] + half * e[:, 1], -half * e[:, 0] + a * e[:, 1], t])


def binary_residuals(xi: np.ndarray, xj: np.ndarray, z: np.ndarray, jacobians: bool = True):
    """Residuals of between factors for ``(N, 3)`` arrays of poses and measurements.

    Returns ``r`` and, if requested, ``Ji`` and ``Jj`` of shape ``(N, 3, 3)``.
    """
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    # b = Ri^T (tj - ti), e_t = Rz^T (b - tz)
    bx, by = ci * dx + si * dy, -si * dx + ci * dy
    ux, uy = bx - z[:, 0], by - z[:, 1]
    e = np.column_stack([cz * ux + sz * uy, -sz * ux + cz * uy, wrap_angles(xj[:, 2] - xi[:, 2] - z[:, 2])])
    r = _log_rows(e)
    if not jacobians:
        return r
    n = len(e)
    # derivatives of e wrt xi, xj
    Rzt = np.zeros((n, 2, 2))
    Rzt[:, 0, 0], Rzt[:, 0, 1], Rzt[:, 1, 0], Rzt[:, 1, 1] = cz, sz, -sz, cz
    Rit = np.zeros((n, 2, 2))
    Rit[:, 0, 0], Rit[:, 0, 1], Rit[:, 1, 0], Rit[:, 1, 1] = ci, si, -si, ci
    RzRi = Rzt @ Rit
    db_dth = np.column_stack([-si * dx + ci * dy, -ci * dx - si * dy])
    Ei = np.zeros((n, 3, 3))
    Ej = np.zeros((n, 3, 3))
    Ei[:, :2, :2] = -RzRi
    Ei[:, :2, 2] = np.einsum("nab,nb->na", Rzt, db_dth)
    Ei[:, 2, 2] = -1.0
    Ej[:, :2, :2] = RzRi
    Ej[:, 2, 2] = 1.0
    L = _log_jacobian(e)
    return r, L @ Ei, L @ Ej


def prior_residuals(x: np.ndarray, z: np.ndarray, jacobians: bool = True):
    cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
    ux, uy = x[:, 0] - z[:, 0], x[:, 1] - z[:, 1]
    e = np.column_stack([cz * ux + sz * uy, -sz * ux + cz * uy, wrap_angles(x[:, 2] - z[:, 2])])
    r = _log_rows(e)
    if not jacobians:
        return r
    E = np.zeros((len(e), 3, 3))
    E[:, 0, 0], E[:, 0, 1], E[:, 1, 0], E[:, 1, 1] = cz, sz, -sz, cz
    E[:, 2, 2] = 1.0
    return r, _log_jacobian(e) @ E


def residual(f: Factor, poses: Mapping[Key, Pose2]) -> np.ndarray:
    """Unwhitened residual of one factor."""
    z = f.measurement.as_array()[None, :]
    if f.kind is FactorKind.PRIOR:
        return prior_residuals(poses[f.keys[0]].as_array()[None, :], z, False)[0]
    xi = poses[f.keys[0]].as_array()[None, :]
    xj = poses[f.keys[1]].as_array()[None, :]
    return binary_residuals(xi, xj, z, False)[0]


def residual_jacobians(f: Factor, poses: Mapping[Key, Pose2]) -> tuple[np.ndarray, ...]:
    """Residual Jacobian blocks, one ``3x3`` per endpoint."""
    z = f.measurement.as_array()[None, :]
    if f.kind is FactorKind.PRIOR:
        _, J = prior_residuals(poses[f.keys[0]].as_array()[None, :], z)
        return (J[0],)
    xi = poses[f.keys[0]].as_array()[None, :]
    xj = poses[f.keys[1]].as_array()[None, :]
    _, Ji, Jj = binary_residuals(xi, xj, z)
    return (Ji[0], Jj[0])


# -- optimisation ------------------------------------------------------------


@dataclass
class OptimizeResult:
    poses: dict[Key, Pose2]
    chi2: list[float]
    iterations: int
    converged: bool
    disconnected: list[Key] = field(default_factory=list)


def anchored_keys(g: GraphState) -> set[Key]:
    """Keys connected to a prior through binary factors."""
    adj: dict[Key, list[Key]] = defaultdict(list)
    roots = []
    for f in g.factors:
        if f.kind is FactorKind.PRIOR:
            roots.append(f.keys[0])
        else:
            a, b = f.keys
            adj[a].append(b)
            adj[b].append(a)
    seen = set(roots)
    queue = deque(roots)
    while queue:
        k = queue.popleft()
        for n in adj[k]:
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return seen


class _Problem:
    """Factor arrays for one optimisation run."""

    def __init__(self, factors: Sequence[Factor], index: Mapping[Key, int]):
        binary = [f for f in factors if f.kind is not FactorKind.PRIOR]
        priors = [f for f in factors if f.kind is FactorKind.PRIOR]
        self.n_vars = len(index)
        self.bi = np.array([index[f.keys[0]] for f in binary], dtype=np.int64)
        self.bj = np.array([index[f.keys[1]] for f in binary], dtype=np.int64)
        self.bz = np.array([f.measurement.as_array() for f in binary]).reshape(-1, 3)
        self.bw = np.array([f.sqrt_info for f in binary]).reshape(-1, 3, 3)
        self.pi = np.array([index[f.keys[0]] for f in priors], dtype=np.int64)
        self.pz = np.array([f.measurement.as_array() for f in priors]).reshape(-1, 3)
        self.pw = np.array([f.sqrt_info for f in priors]).reshape(-1, 3, 3)

    def chi2(self, x: np.ndarray) -> float:
        total = 0.0
        if len(self.bi):
            r = binary_residuals(x[self.bi], x[self.bj], self.bz, False)
            total += float(np.sum(np.einsum("nab,nb->na", self.bw, r) ** 2))
        if len(self.pi):
            r = prior_residuals(x[self.pi], self.pz, False)
            total += float(np.sum(np.einsum("nab,nb->na", self.pw, r) ** 2))
        return total

    def linearize(self, x: np.ndarray) -> tuple[sp.csc_matrix, np.ndarray]:
        """Whitened Jacobian as ``J^T J`` and gradient ``J^T r``."""
        rows, cols, vals, res = [], [], [], []
        offset = 0
        blocks = []
        if len(self.bi):
            r, Ji, Jj = binary_residuals(x[self.bi], x[self.bj], self.bz)
            blocks.append((r, self.bw, [(self.bi, Ji), (self.bj, Jj)]))
        if len(self.pi):
            r, J = prior_residuals(x[self.pi], self.pz)
            blocks.append((r, self.pw, [(self.pi, J)]))
        base_r = np.arange(3)[:, None].repeat(3, axis=1)
        base_c = np.arange(3)[None, :].repeat(3, axis=0)
        for r, W, parts in blocks:
            n = len(r)
            res.append(np.einsum("nab,nb->na", W, r).ravel())
            row0 = offset + 3 * np.arange(n)
            for var, J in parts:
                WJ = W @ J
                rows.append((row0[:, None, None] + base_r[None]).ravel())
                cols.append((3 * var[:, None, None] + base_c[None]).ravel())
                vals.append(WJ.ravel())
            offset += 3 * n
        J = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, 3 * self.n_vars),
        )
        rv = np.concatenate(res)
        return (J.T @ J).tocsc(), J.T @ rv


def optimize(
    g: GraphState,
    max_iter: int = MAX_ITERATIONS,
    rel_tol: float = REL_TOL,
    damping: float = 1e-4,
) -> OptimizeResult:
    """Levenberg-Marquardt over every pose connected to the prior.

    Poses outside the prior's component are left unchanged and listed in
    ``disconnected``. Only steps that lower chi2 are accepted, so the
    returned chi2 sequence never increases. ``g.poses`` is updated in place.

    Raises:
        SingularSystemError: if the graph has no prior or the damped normal
            equations cannot be solved.
    """
    if not g.has_prior():
        raise SingularSystemError("graph has no prior factor; gauge is not fixed")
    anchored = anchored_keys(g)
    keys = sorted(k for k in g.poses if k in anchored)
    disconnected = sorted(k for k in g.poses if k not in anchored)
    index = {k: i for i, k in enumerate(keys)}
    factors = [f for f in g.factors if all(k in index for k in f.keys)]
    prob = _Problem(factors, index)
    x = np.array([g.poses[k].as_array() for k in keys]).reshape(-1, 3)

    chi2 = [prob.chi2(x)]
    lam = damping
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if chi2[-1] <= 1e-24:
            converged = True
            break
        H, b = prob.linearize(x)
        diag = H.diagonal()
        if np.any(diag <= 0):
            raise SingularSystemError("a pose has no constraining factor")
        accepted = False
        while lam < 1e12:
            A = H + sp.diags(lam * diag)
            with np.errstate(all="ignore"):
                dx = spla.spsolve(A.tocsc(), -b)
            if not np.all(np.isfinite(dx)):
                raise SingularSystemError("normal equations are singular")
            x_new = x + dx.reshape(-1, 3)
            x_new[:, 2] = wrap_angles(x_new[:, 2])
            c_new = prob.chi2(x_new)
            if c_new < chi2[-1]:
                accepted = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        prev = chi2[-1]
        x = x_new
        chi2.append(c_new)
        if (prev - c_new) <= rel_tol * max(prev, 1e-300):
            converged = True
            break

    for k, row in zip(keys, x):
        g.poses[k] = Pose2(row[0], row[1], row[2])
    return OptimizeResult(dict(g.poses), chi2, iterations, converged, disconnected)


def changed_poses(
    before: Mapping[Key, Pose2],
    after: Mapping[Key, Pose2],
    threshold_t: float = 0.5,
    threshold_r: float = math.radians(5.0),
) -> list[tuple[Key, Pose2]]:
    """Keys whose pose moved by at least either threshold, in key order."""
    out = []
    for k in sorted(after):
        if k not in before:
            continue
        a, b = before[k], after[k]
        if math.hypot(b.x - a.x, b.y - a.y) >= threshold_t or abs(wrap_angle(b.theta - a.theta)) >= threshold_r:
            out.append((k, b))
    return out


# -- g2o text export ---------------------------------------------------------

G2O_ROBOT_STRIDE = 1_000_000


def g2o_id(key: Key) -> int:
    """Vertex id with the robot id as a decimal prefix: robot 2, keyframe 7 -> 2000007."""
    return key[0] * G2O_ROBOT_STRIDE + key[1]


def _info_upper(f: Factor) -> list[float]:
    info = f.sqrt_info.T @ f.sqrt_info
    return [info[0, 0], info[0, 1], info[0, 2], info[1, 1], info[1, 2], info[2, 2]]


def write_g2o(g: GraphState, out: TextIO) -> None:
    for k in sorted(g.poses):
        p = g.poses[k]
        out.write(f"VERTEX_SE2 {g2o_id(k)} {p.x:.9g} {p.y:.9g} {p.theta:.9g}\n")
    for f in g.factors:
        m = f.measurement
        info = " ".join(f"{v:.9g}" for v in _info_upper(f))
        if f.kind is FactorKind.PRIOR:
            out.write(f"EDGE_SE2_PRIOR {g2o_id(f.keys[0])} {m.x:.9g} {m.y:.9g} {m.theta:.9g} {info}\n")
        else:
            a, b = (g2o_id(k) for k in f.keys)
            out.write(f"EDGE_SE2 {a} {b} {m.x:.9g} {m.y:.9g} {m.theta:.9g} {info}\n")


def export_g2o(g: GraphState, path: str | Path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_g2o(g, fh)


def read_g2o(lines: Iterable[str], own_robot: int = 0) -> GraphState:
    """Parse the subset written by :func:`write_g2o`. Binary edges come back as ODOM."""
    g = GraphState(own_robot)
    edges = []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "VERTEX_SE2":
            vid = int(tok[1])
            g.poses[divmod(vid, G2O_ROBOT_STRIDE)] = Pose2(*map(float, tok[2:5]))
        elif tok[0] in ("EDGE_SE2", "EDGE_SE2_PRIOR"):
            edges.append(tok)
    for tok in edges:
        prior = tok[0] == "EDGE_SE2_PRIOR"
        ids = [int(tok[1])] if prior else [int(tok[1]), int(tok[2])]
        vals = list(map(float, tok[1 + len(ids):]))
        u = vals[3:9]
        info = np.array([[u[0], u[1], u[2]], [u[1], u[3], u[4]], [u[2], u[4], u[5]]])
        kind = FactorKind.PRIOR if prior else FactorKind.ODOM
        keys = tuple(divmod(i, G2O_ROBOT_STRIDE) for i in ids)
        cov = np.linalg.inv(info)
        add_factor(g, Factor(kind, keys, Pose2(*vals[:3]), 0.5 * (cov + cov.T)))
    return g
