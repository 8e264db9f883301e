import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetslam.geometry import Pose2, adjoint, between, compose, exp, inverse, log, poses_close
from fleetslam.graph import (
    DuplicateFactorError,
    Factor,
    FactorKind,
    GraphState,
    KeyframePolicy,
    SingularSystemError,
    add_factor,
    changed_poses,
    diag_cov,
    g2o_id,
    maybe_add_keyframe,
    optimize,
    read_g2o,
    residual,
    residual_jacobians,
    write_g2o,
)

ODOM = diag_cov((0.05, 0.05, math.radians(1)))
PRIOR = diag_cov((1e-3, 1e-3, 1e-3))
coord = st.floats(-30, 30)
angle = st.floats(-3.1, 3.1)
poses = st.builds(Pose2, coord, coord, angle)


def residual_oracle(f, p):
    """Residual straight from the group operations."""
    if f.kind is FactorKind.PRIOR:
        return log(compose(inverse(f.measurement), p[f.keys[0]]))
    return log(compose(inverse(f.measurement), between(p[f.keys[0]], p[f.keys[1]])))


def numeric_jacobian(f, p, key, h=1e-6):
    J = np.zeros((3, 3))
    for d in range(3):
        hi, lo = dict(p), dict(p)
        v = p[key].as_array()
        step = np.zeros(3)
        step[d] = h
        hi[key] = Pose2(*(v + step))
        lo[key] = Pose2(*(v - step))
        diff = residual_oracle(f, hi) - residual_oracle(f, lo)
        diff[2] = math.remainder(diff[2], 2 * math.pi)
        J[:, d] = diff / (2 * h)
    return J


def chain_graph(n=10, noise=None, seed=0):
    rng = np.random.default_rng(seed)
    g = GraphState(0)
    add_factor(g, Factor(FactorKind.PRIOR, ((0, 0),), Pose2(), PRIOR))
    truth = [Pose2()]
    for k in range(1, n):
        u = Pose2(2.0, 0.1 * math.sin(k), 0.2 * math.cos(k))
        truth.append(compose(truth[-1], u))
        z = u if noise is None else compose(u, exp(rng.normal(0, noise)))
        add_factor(g, Factor(FactorKind.ODOM, ((0, k - 1), (0, k)), z, ODOM))
    return g, truth


def test_keyframe_policy():
    pol = KeyframePolicy(2.0, math.radians(30))
    assert not maybe_add_keyframe(Pose2(), pol)
    assert maybe_add_keyframe(Pose2(2.5, 0, 0), pol)
    assert maybe_add_keyframe(Pose2(0.1, 0, math.radians(35)), pol)
    assert maybe_add_keyframe(Pose2(2.0, 0, 0), pol)
    with pytest.raises(ValueError):
        KeyframePolicy(0.0, 1.0)


def test_factor_validation():
    with pytest.raises(ValueError):
        Factor(FactorKind.ODOM, ((0, 0),), Pose2(), ODOM)
    with pytest.raises(ValueError):
        Factor(FactorKind.PRIOR, ((0, 0), (0, 1)), Pose2(), ODOM)
    with pytest.raises(ValueError):
        Factor(FactorKind.ODOM, ((0, 0), (0, 1)), Pose2(), -ODOM)


def test_add_factor_examples():
    g = GraphState(0)
    add_factor(g, Factor(FactorKind.PRIOR, ((0, 0),), Pose2(1, 2, 0.3), PRIOR))
    z = Pose2(2, 0, 0.1)
    add_factor(g, Factor(FactorKind.ODOM, ((0, 0), (0, 1)), z, ODOM))
    assert len(g.poses) == 2
    assert poses_close(g.poses[(0, 1)], compose(Pose2(1, 2, 0.3), z), 1e-12)
    ir = Pose2(3, -1, 2.0)
    add_factor(g, Factor(FactorKind.IR, ((0, 1), (1, 5)), ir, ODOM))
    assert poses_close(g.poses[(1, 5)], compose(g.poses[(0, 1)], ir), 1e-12)
    # reverse direction initialises the first endpoint
    add_factor(g, Factor(FactorKind.PR, ((1, 4), (1, 5)), Pose2(1, 0, 0), ODOM))
    assert poses_close(compose(g.poses[(1, 4)], Pose2(1, 0, 0)), g.poses[(1, 5)], 1e-12)
    with pytest.raises(DuplicateFactorError):
        add_factor(g, Factor(FactorKind.ODOM, ((0, 0), (0, 1)), z, ODOM))
    with pytest.raises(KeyError):
        add_factor(g, Factor(FactorKind.ODOM, ((2, 0), (2, 1)), z, ODOM))
    with pytest.raises(ValueError):
        add_factor(g, Factor(FactorKind.PRIOR, ((0, 1),), Pose2(), PRIOR))


def test_residual_examples():
    p = {(0, 0): Pose2(1, 0, 0)}
    f = Factor(FactorKind.PRIOR, ((0, 0),), Pose2(), PRIOR)
    np.testing.assert_allclose(residual(f, p), [1, 0, 0], atol=1e-12)
    a, b = Pose2(1, 2, 0.5), Pose2(-3, 1, 2.0)
    f = Factor(FactorKind.ODOM, ((0, 0), (0, 1)), between(a, b), ODOM)
    np.testing.assert_allclose(residual(f, {(0, 0): a, (0, 1): b}), 0, atol=1e-12)


@settings(max_examples=200)
@given(poses, poses, poses)
def test_residual_matches_group_oracle(a, b, z):
    f = Factor(FactorKind.SSM, ((0, 0), (0, 1)), z, ODOM)
    p = {(0, 0): a, (0, 1): b}
    r, o = residual(f, p), residual_oracle(f, p)
    # the angle may sit on either side of the wrap
    assert math.remainder(r[2] - o[2], 2 * math.pi) == pytest.approx(0, abs=1e-9)
    if abs(abs(o[2]) - math.pi) > 1e-6:
        np.testing.assert_allclose(r, o, atol=1e-7)


@settings(max_examples=200)
@given(poses, poses, st.builds(Pose2, st.floats(-3, 3), st.floats(-3, 3), st.floats(-0.5, 0.5)))
def test_swapped_inverse_measurement(a, b, dz):
    """Inverse measurement at swapped endpoints gives the negated residual, rotated by Ad(Z)."""
    z = compose(between(a, b), dz)
    f = Factor(FactorKind.ODOM, ((0, 0), (0, 1)), z, ODOM)
    g = Factor(FactorKind.ODOM, ((0, 1), (0, 0)), inverse(z), ODOM)
    p = {(0, 0): a, (0, 1): b}
    r, rs = residual(f, p), residual(g, p)
    # E' = Z Xj^-1 Xi = Z E^-1 Z^-1, so Log(E') = -Ad(Z) Log(E)
    np.testing.assert_allclose(rs, -adjoint(z) @ r, atol=1e-7)


@settings(max_examples=300)
@given(poses, poses, poses)
def test_jacobians_match_finite_differences(a, b, z):
    if abs(abs(residual_oracle(Factor(FactorKind.ODOM, ((0, 0), (0, 1)), z, ODOM), {(0, 0): a, (0, 1): b})[2]) - math.pi) < 1e-3:
        return
    for kind, keys in ((FactorKind.ODOM, ((0, 0), (0, 1))), (FactorKind.PRIOR, ((0, 0),))):
        f = Factor(kind, keys, z, ODOM)
        p = {(0, 0): a, (0, 1): b}
        for key, J in zip(keys, residual_jacobians(f, p)):
            Jn = numeric_jacobian(f, p, key)
            scale = max(1.0, np.abs(Jn).max())
            assert np.abs(J - Jn).max() / scale < 1e-5


def test_exact_chain_zero_chi2():
    g, truth = chain_graph()
    res = optimize(g)
    assert res.chi2[-1] < 1e-20
    for k, t in enumerate(truth):
        assert poses_close(g.poses[(0, k)], t, 1e-9)


def test_triangle_loop_distributes_error():
    g = GraphState(0)
    add_factor(g, Factor(FactorKind.PRIOR, ((0, 0),), Pose2(), PRIOR))
    add_factor(g, Factor(FactorKind.ODOM, ((0, 0), (0, 1)), Pose2(1, 0, math.pi / 2), ODOM))
    add_factor(g, Factor(FactorKind.ODOM, ((0, 1), (0, 2)), Pose2(1, 0, math.pi / 2), ODOM))
    # the closing edge disagrees by 0.1 m
    add_factor(g, Factor(FactorKind.SSM, ((0, 2), (0, 0)), Pose2(1.0, 1.1, math.pi), ODOM))
    before = [np.linalg.norm(residual(f, g.poses)[:2]) for f in g.factors[1:]]
    res = optimize(g)
    after = [np.linalg.norm(residual(f, g.poses)[:2]) for f in g.factors[1:]]
    assert res.chi2[-1] < res.chi2[0]
    assert max(before) == pytest.approx(0.1, abs=1e-9)
    assert max(after) < 0.1
    assert all(x > 0.0 for x in after)
    assert np.all(np.diff(res.chi2) <= 0)


def test_no_prior_singular():
    g = GraphState(0)
    g.poses[(0, 0)] = Pose2()
    add_factor(g, Factor(FactorKind.ODOM, ((0, 0), (0, 1)), Pose2(1, 0, 0), ODOM))
    with pytest.raises(SingularSystemError):
        optimize(g)


def test_disconnected_component_untouched():
    g, _ = chain_graph(4)
    g.poses[(1, 0)] = Pose2(50, 50, 1)
    add_factor(g, Factor(FactorKind.PR, ((1, 0), (1, 1)), Pose2(1, 0, 0), ODOM))
    g.poses[(1, 1)] = Pose2(99, 0, 0)
    res = optimize(g)
    assert res.disconnected == [(1, 0), (1, 1)]
    assert g.poses[(1, 1)] == Pose2(99, 0, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), poses)
def test_chi2_monotone_and_gauge_invariant(seed, shift):
    g, truth = chain_graph(12, noise=[0.1, 0.1, 0.05], seed=seed)
    rng = np.random.default_rng(seed)
    # a loop closure back to the start
    add_factor(g, Factor(FactorKind.SSM, ((0, 11), (0, 0)), compose(between(truth[11], truth[0]), exp(rng.normal(0, 0.05, 3))), ODOM))
    h = GraphState(0)
    for f in g.factors:
        if f.kind is FactorKind.PRIOR:
            add_factor(h, Factor(f.kind, f.keys, compose(shift, f.measurement), f.covariance))
        else:
            add_factor(h, f)
    h.poses = {k: compose(shift, v) for k, v in g.poses.items()}
    rg, rh = optimize(g), optimize(h)
    assert np.all(np.diff(rg.chi2) <= 0)
    assert rg.chi2[0] == pytest.approx(rh.chi2[0], rel=1e-9, abs=1e-9)
    assert rg.chi2[-1] == pytest.approx(rh.chi2[-1], rel=1e-6, abs=1e-9)


def test_changed_poses_examples():
    before = {(0, k): Pose2(k, 0, 0) for k in range(5)}
    assert changed_poses(before, dict(before)) == []
    after = dict(before)
    after[(0, 2)] = Pose2(2, 1.0, 0)
    assert [k for k, _ in changed_poses(before, after, 0.5)] == [(0, 2)]
    shifted = {k: Pose2(p.x + 0.49, p.y, p.theta) for k, p in before.items()}
    assert changed_poses(before, shifted, 0.5) == []
    rotated = {k: Pose2(p.x, p.y, math.radians(5.01)) for k, p in before.items()}
    assert len(changed_poses(before, rotated, 0.5, math.radians(5))) == 5


def test_g2o_roundtrip():
    g, _ = chain_graph(5, noise=[0.1, 0.1, 0.05])
    add_factor(g, Factor(FactorKind.IR, ((0, 2), (3, 7)), Pose2(1, 1, 1), ODOM))
    buf = io.StringIO()
    write_g2o(g, buf)
    text = buf.getvalue()
    assert "VERTEX_SE2 3000007" in text and text.count("EDGE_SE2 ") == 5
    assert g2o_id((2, 7)) == 2_000_007
    h = read_g2o(text.splitlines())
    assert sorted(h.poses) == sorted(g.poses)
    for f, e in zip(g.factors, h.factors):
        assert f.keys == e.keys
        assert poses_close(f.measurement, e.measurement, 1e-7)
        np.testing.assert_allclose(f.covariance, e.covariance, rtol=1e-6)
