import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from multisgraph import geometry as G
from multisgraph.geometry import Pose3

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec6 = st.lists(finite, min_size=6, max_size=6).map(np.array)


def random_pose(rng, scale=2.0):
    return Pose3.exp(np.r_[rng.uniform(-scale, scale, 3), rng.uniform(-1.5, 1.5, 3)])


def hat6(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = G.skew(xi[3:])
    M[:3, 3] = xi[:3]
    return M


@given(vec6)
def test_exp_matches_matrix_exponential(xi):
    xi = xi * 0.5
    assert np.allclose(Pose3.exp(xi).matrix(), expm(hat6(xi)), atol=1e-9)


@given(vec6)
def test_log_inverts_exp(xi):
    xi = xi * 0.5  # rotation angle stays below pi
    assert np.allclose(Pose3.exp(xi).log(), xi, atol=1e-9)


def test_log_matches_matrix_logarithm():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = random_pose(rng)
        L = np.real(logm(T.matrix()))
        xi = np.r_[L[:3, 3], L[2, 1], L[0, 2], L[1, 0]]
        assert np.allclose(T.log(), xi, atol=1e-8)


def test_compose_inverse_identity():
    rng = np.random.default_rng(2)
    for _ in range(50):
        T = random_pose(rng)
        assert (T @ T.inverse()).almost_equal(Pose3(), 1e-12)
        assert np.allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(3)
    A, B = random_pose(rng), random_pose(rng)
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)


def test_adjoint_identity():
    rng = np.random.default_rng(4)
    T = random_pose(rng)
    xi = rng.normal(size=6)
    lhs = T @ Pose3.exp(xi) @ T.inverse()
    assert lhs.almost_equal(Pose3.exp(T.adjoint() @ xi), 1e-9)


def test_quaternion_convention_against_scipy():
    rng = np.random.default_rng(5)
    for _ in range(20):
        q = G.quat_normalize(rng.normal(size=4))
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        assert np.allclose(G.quat_to_matrix(q), R, atol=1e-12)
        back = G.matrix_to_quat(R)
        assert np.isclose(abs(back @ q), 1.0)


def test_yaw_constructor():
    T = Pose3.from_xyz_yaw(1.0, 2.0, 0.0, np.pi / 2)
    assert np.allclose(T.act(np.array([1.0, 0.0, 0.0])), [1.0, 3.0, 0.0])
    assert np.isclose(T.yaw, np.pi / 2)


def test_left_jacobian_inverse():
    rng = np.random.default_rng(6)
    for _ in range(20):
        xi = rng.normal(size=6)
        assert np.allclose(G.se3_left_jacobian(xi) @ G.se3_left_jacobian_inv(xi), np.eye(6), atol=1e-9)


@pytest.mark.parametrize("scale", [1e-9, 1e-4, 0.05, 1.0, 2.5])
def test_batched_helpers_match_scalar(scale):
    rng = np.random.default_rng(7)
    xis = rng.normal(size=(30, 6)) * scale
    poses = [Pose3.exp(x) for x in xis]
    q = np.array([p.q for p in poses])
    t = np.array([p.t for p in poses])
    assert np.allclose(G.se3_log_batch(q, t), [p.log() for p in poses], atol=1e-9)
    assert np.allclose(G.quat_to_matrix_batch(q), [p.R for p in poses], atol=1e-12)
    assert np.allclose(G.se3_left_jacobian_inv_batch(xis), [G.se3_left_jacobian_inv(x) for x in xis], atol=1e-9)
    assert np.allclose(G.skew_batch(xis[:, :3]), [G.skew(x[:3]) for x in xis])
    q2 = q[::-1]
    assert np.allclose(G.quat_multiply_batch(q, q2), [G.quat_multiply(a, b) for a, b in zip(q, q2)])


def test_pose_error():
    a = Pose3.from_xyz_yaw(1.0, 0.0, 0.0, 0.1)
    b = Pose3.from_xyz_yaw(1.0, 0.3, 0.0, 0.0)
    et, er = G.pose_error(a, b)
    assert np.isclose(et, 0.3)
    assert np.isclose(er, 0.1)


@settings(max_examples=200)
@given(st.lists(finite, min_size=3, max_size=3), st.floats(-5, 5, allow_nan=False))
def test_canonical_plane_idempotent(n, d):
    n = np.asarray(n)
    if np.linalg.norm(n) < 1e-3:
        n = np.array([0.0, 0.0, 1.0])
    n1, d1 = G.canonical_plane(n / np.linalg.norm(n), d)
    n2, d2 = G.canonical_plane(n1, d1)
    assert d1 >= 0.0
    assert np.array_equal(n1, n2) and d1 == d2


def test_sphere_retract_stays_unit():
    rng = np.random.default_rng(8)
    n = G.quat_normalize(rng.normal(size=4))[:3]
    n = n / np.linalg.norm(n)
    for _ in range(10000):
        n = G.sphere_retract(n, rng.normal(size=2) * 0.3)
    assert abs(np.linalg.norm(n) - 1.0) < 1e-12
