import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risam import geometry as geo
from risam.geometry import SE2, SE3, Pose2, Pose3

from conftest import random_pose, random_pose2, random_pose3

angles = st.floats(-math.pi + 1e-6, math.pi, allow_nan=False)
coords = st.floats(-50, 50, allow_nan=False)


def close(a, b, tol=1e-9):
    return np.allclose(a.to_array(), b.to_array(), atol=tol) or \
        (isinstance(a, Pose3) and np.allclose(a.to_array() * [-1, -1, -1, -1, 1, 1, 1],
                                               b.to_array(), atol=tol))


def test_pose2_examples():
    assert close(geo.compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0)), Pose2(1, 1, math.pi / 2))
    assert close(geo.between(Pose2(1, 1, math.pi / 2), Pose2(1, 2, math.pi / 2)), Pose2(1, 0, 0))
    assert close(geo.retract(Pose2(), [1, 0, 0]), Pose2(1, 0, 0))
    assert np.allclose(geo.local(Pose2(), Pose2(0, 0, 0.3)), [0, 0, 0.3])


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 1001)
    w = geo.wrap_angle(th)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.cos(w), np.cos(th)) and np.allclose(np.sin(w), np.sin(th))
    assert geo.wrap_angle(-math.pi) == math.pi
    assert geo.wrap_angle(0.5) == 0.5


@pytest.mark.parametrize("group", [SE2, SE3])
def test_identity_inverse(group, rng):
    for _ in range(20):
        p = random_pose(rng, group)
        e = geo.identity_like(p)
        assert close(geo.compose(e, p), p)
        assert close(geo.compose(p, geo.inverse(p)), e)
        assert close(geo.between(p, p), e)
        assert close(geo.between(e, p), p)
        assert close(geo.retract(p, np.zeros(group.dim)), p)
        assert np.allclose(geo.local(p, p), 0, atol=1e-12)


@pytest.mark.parametrize("group", [SE2, SE3])
def test_retract_local_roundtrip(group, rng):
    for _ in range(50):
        a, b = random_pose(rng, group), random_pose(rng, group)
        assert close(geo.retract(a, geo.local(a, b)), b, 1e-8)
        d = rng.normal(scale=0.5, size=group.dim)
        assert np.allclose(geo.local(a, geo.retract(a, d)), d, atol=1e-9)


@pytest.mark.parametrize("group", [SE2, SE3])
def test_associativity(group, rng):
    for _ in range(20):
        a, b, c = (random_pose(rng, group) for _ in range(3))
        assert close(geo.compose(geo.compose(a, b), c), geo.compose(a, geo.compose(b, c)), 1e-9)


@pytest.mark.parametrize("group", [SE2, SE3])
def test_exp_log_small_and_large(group):
    for scale in (1e-9, 1e-4, 0.05, 0.5, 1.0):  # rotation angle stays below pi
        v = np.full(group.dim, scale)
        assert np.allclose(group.log(group.exp(v)), v, atol=1e-10)


@pytest.mark.parametrize("group", [SE2, SE3])
def test_adjoint_identity(group, rng):
    # p Exp(v) p^-1 == Exp(Ad_p v)
    for _ in range(20):
        p = random_pose(rng, group).to_array()
        v = rng.normal(scale=0.3, size=group.dim)
        lhs = group.compose(group.compose(p, group.exp(v)), group.inverse(p))
        rhs = group.exp(group.adjoint(p) @ v)
        assert np.allclose(group.log(group.between(lhs, rhs)), 0, atol=1e-9)


@pytest.mark.parametrize("group", [SE2, SE3])
def test_right_jacobian_inverse_fd(group, rng):
    # Log(Exp(v) Exp(h)) ~ v + Jr^-1(v) h
    for _ in range(20):
        v = rng.normal(scale=0.7, size=group.dim)
        J = group.right_jacobian_inv(v)
        eps = 1e-6
        num = np.zeros((group.dim, group.dim))
        for k in range(group.dim):
            h = np.zeros(group.dim)
            h[k] = eps
            up = group.log(group.compose(group.exp(v), group.exp(h)))
            dn = group.log(group.compose(group.exp(v), group.exp(-h)))
            num[:, k] = (up - dn) / (2 * eps)
        assert np.allclose(J, num, atol=1e-6)


def test_vectorized_matches_scalar(rng):
    for group in (SE2, SE3):
        a = np.stack([random_pose(rng, group).to_array() for _ in range(10)])
        b = np.stack([random_pose(rng, group).to_array() for _ in range(10)])
        batch = group.local(a, b)
        for i in range(10):
            assert np.allclose(batch[i], group.local(a[i], b[i]))


def test_pose3_from_matrix_and_normalization():
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    p = Pose3(R, (1, 2, 3))
    assert np.allclose(p.rotation_matrix, R)
    q = Pose3((2.0, 0, 0, 0), (0, 0, 0))
    assert q.quaternion == (1.0, 0.0, 0.0, 0.0)


def test_group_mismatch_and_bad_tangent():
    with pytest.raises(TypeError):
        geo.compose(Pose2(), Pose3())
    with pytest.raises(ValueError):
        geo.retract(Pose2(), np.zeros(6))


@settings(max_examples=200, deadline=None)
@given(coords, coords, angles, coords, coords, angles)
def test_pose2_between_compose_property(x1, y1, t1, x2, y2, t2):
    a, b = Pose2(x1, y1, t1), Pose2(x2, y2, t2)
    assert close(geo.compose(a, geo.between(a, b)), b, 1e-7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=6, max_size=6))
def test_se3_exp_log_property(v):
    v = np.array(v)
    if np.linalg.norm(v[3:]) >= math.pi - 1e-3:
        return
    assert np.allclose(SE3.log(SE3.exp(v)), v, atol=1e-8)
