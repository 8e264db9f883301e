import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetslam.geometry import (
    PointCloud2D,
    Pose2,
    SonarReturn,
    adjoint,
    between,
    compose,
    compose_arrays,
    exp,
    inverse,
    log,
    log_arrays,
    polar_to_cartesian,
    poses_close,
    transform_points,
    wrap_angle,
)

coord = st.floats(-100.0, 100.0, allow_nan=False)
angle = st.floats(-10.0, 10.0, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def mat(p: Pose2) -> np.ndarray:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def from_mat(m: np.ndarray) -> Pose2:
    return Pose2(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def test_compose_translation_then_rotation():
    out = compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0))
    assert poses_close(out, Pose2(1, 1, math.pi / 2), 1e-12)


def test_inverse_of_identity_is_identity():
    assert poses_close(inverse(Pose2()), Pose2(), 0.0)


def test_between_example():
    assert poses_close(between(Pose2(1, 1, 0), Pose2(2, 1, 0)), Pose2(1, 0, 0), 1e-12)


def test_wrap_half_open():
    assert wrap_angle(math.pi) == -math.pi
    assert wrap_angle(-math.pi) == -math.pi
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(-math.pi)


def test_nonfinite_pose_rejected():
    with pytest.raises(ValueError):
        Pose2(float("nan"), 0, 0)
    with pytest.raises(ValueError):
        Pose2(0, float("inf"), 0)


@given(poses, poses)
def test_compose_matches_homogeneous_matrices(a, b):
    assert poses_close(compose(a, b), from_mat(mat(a) @ mat(b)), 1e-8)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert poses_close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-7)


@given(poses)
def test_inverse_roundtrip(p):
    assert poses_close(compose(p, inverse(p)), Pose2(), 1e-9)
    assert poses_close(compose(inverse(p), p), Pose2(), 1e-9)


@given(poses, poses)
def test_between_consistent_with_compose(a, b):
    assert poses_close(compose(a, between(a, b)), b, 1e-8)


@given(poses)
def test_theta_always_wrapped(p):
    assert -math.pi <= p.theta < math.pi


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3.1, 3.1))
def test_log_exp_roundtrip(x, y, t):
    p = Pose2(x, y, t)
    assert poses_close(exp(log(p)), p, 1e-8)


@given(poses, st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_adjoint_identity(p, a, b, c):
    xi = np.array([a, b, c])
    lhs = compose(compose(p, exp(xi)), inverse(p))
    assert poses_close(lhs, exp(adjoint(p) @ xi), 1e-8)


def test_log_small_angle_branch_continuous():
    for t in (1e-3, 1e-4, 9.99e-5, 1e-6):
        p = Pose2(1.0, 2.0, t)
        assert poses_close(exp(log(p)), p, 1e-10)


@given(st.lists(st.tuples(poses, poses), min_size=1, max_size=10))
def test_vectorised_helpers_match_scalar(pairs):
    a = np.array([p.as_array() for p, _ in pairs])
    b = np.array([q.as_array() for _, q in pairs])
    out = compose_arrays(a, b)
    for row, (p, q) in zip(out, pairs):
        assert poses_close(Pose2(*row), compose(p, q), 1e-8)
    lg = log_arrays(a)
    for row, (p, _) in zip(lg, pairs):
        np.testing.assert_allclose(row, log(p), atol=1e-8)


def test_polar_to_cartesian_planar():
    x, y, z = polar_to_cartesian(SonarReturn(2.0, math.pi / 2))
    assert x == pytest.approx(0.0, abs=1e-15)
    assert y == pytest.approx(2.0)
    assert z == 0.0


def test_polar_to_cartesian_elevation():
    x, y, z = polar_to_cartesian(SonarReturn(2.0, 0.0, math.pi / 6))
    assert (x, y, z) == pytest.approx((2 * math.cos(math.pi / 6), 0.0, 1.0))


def test_sonar_return_validation():
    with pytest.raises(ValueError):
        SonarReturn(-1.0, 0.0)
    with pytest.raises(ValueError):
        SonarReturn(1.0, 0.0, intensity=-0.1)


def test_point_cloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointCloud2D(np.array([[0.0, np.nan]]))
    assert len(PointCloud2D.from_iterable([(0, 1), (2, 3)])) == 2


@settings(max_examples=50)
@given(poses, st.lists(st.tuples(coord, coord), min_size=1, max_size=20))
def test_transform_points_matches_matrix(p, pts):
    arr = np.array(pts, dtype=float)
    homog = np.column_stack([arr, np.ones(len(arr))]) @ mat(p).T
    np.testing.assert_allclose(transform_points(p, arr), homog[:, :2], atol=1e-8)
