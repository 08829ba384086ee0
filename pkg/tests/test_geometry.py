import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from miliom.geometry import (
    RigidTransform,
    exp_rotvec,
    log_quat,
    quat_conj,
    quat_mul,
    quat_to_rotmat,
    right_jacobian,
    right_jacobian_inv,
    rotation_angle,
    slerp,
    sym3_eigvalsh,
    sym3_solve,
    transform_point,
)


def rodrigues(v):
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def random_quat(rng, n=None):
    q = rng.normal(size=(4,) if n is None else (n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


vectors = arrays(np.float64, 3, elements=st.floats(-3.0, 3.0))


def test_exp_zero_is_identity():
    np.testing.assert_array_equal(exp_rotvec(np.zeros(3)), [1, 0, 0, 0])


def test_exp_half_turn():
    np.testing.assert_allclose(exp_rotvec([np.pi, 0, 0]), [0, 1, 0, 0], atol=1e-15)


def test_exp_matches_rodrigues():
    rng = np.random.default_rng(0)
    for v in rng.normal(scale=1.5, size=(200, 3)):
        np.testing.assert_allclose(quat_to_rotmat(exp_rotvec(v)), rodrigues(v), atol=1e-10)


def test_exp_tiny_angle_is_smooth():
    v = np.array([3e-9, -1e-9, 2e-9])
    np.testing.assert_allclose(quat_to_rotmat(exp_rotvec(v)), rodrigues(v), atol=1e-16)
    np.testing.assert_allclose(log_quat(exp_rotvec(v)), v, rtol=1e-9)


def test_log_identity_and_quarter_turn():
    np.testing.assert_array_equal(log_quat(np.array([1.0, 0, 0, 0])), np.zeros(3))
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(log_quat(q), [0, 0, np.pi / 2], atol=1e-15)


def test_log_exp_roundtrip_random_quaternions():
    rng = np.random.default_rng(1)
    q = random_quat(rng, 1000)
    back = exp_rotvec(log_quat(q))
    assert np.max(rotation_angle(q, back)) < 1e-9


@given(vectors)
def test_exp_log_roundtrip(v):
    if np.linalg.norm(v) >= np.pi - 1e-6:
        v = v / np.linalg.norm(v) * (np.pi - 1e-3)
    np.testing.assert_allclose(log_quat(exp_rotvec(v)), v, atol=1e-9)


def test_product_matches_matrix_product():
    rng = np.random.default_rng(2)
    q1, q2 = random_quat(rng, 500), random_quat(rng, 500)
    lhs = quat_to_rotmat(quat_mul(q1, q2))
    rhs = quat_to_rotmat(q1) @ quat_to_rotmat(q2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_slerp_endpoints_and_midpoint():
    rng = np.random.default_rng(3)
    q1, q2 = random_quat(rng), random_quat(rng)
    assert rotation_angle(slerp(q1, q2, 0.0), q1) < 1e-12
    assert rotation_angle(slerp(q1, q2, 1.0), q2) < 1e-7
    q90 = exp_rotvec([0, 0, np.pi / 2])
    mid = slerp(np.array([1.0, 0, 0, 0]), q90, 0.5)
    assert rotation_angle(mid, exp_rotvec([0, 0, np.pi / 4])) < 1e-12


def test_slerp_matches_log_exp_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q1, q2 = random_quat(rng), random_quat(rng)
        if np.dot(q1, q2) < 0:
            q2 = -q2
        s = rng.uniform()
        expected = quat_mul(q1, exp_rotvec(s * log_quat(quat_mul(quat_conj(q1), q2))))
        assert rotation_angle(slerp(q1, q2, s), expected) < 1e-10


@settings(max_examples=50)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_slerp_unit_norm(s, seed):
    rng = np.random.default_rng(seed)
    q = slerp(random_quat(rng), random_quat(rng), s)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_transform_point_basics():
    p = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(transform_point(RigidTransform.identity(), p), p)
    T = RigidTransform(t=[1, 2, 3])
    np.testing.assert_array_equal(transform_point(T, np.zeros(3)), [1, 2, 3])


def test_compose_associativity_and_inverse():
    rng = np.random.default_rng(5)
    for _ in range(100):
        T1 = RigidTransform(random_quat(rng), rng.normal(size=3))
        T2 = RigidTransform(random_quat(rng), rng.normal(size=3))
        p = rng.normal(size=3)
        np.testing.assert_allclose((T1 @ T2).apply(p), T1.apply(T2.apply(p)), atol=1e-10)
        np.testing.assert_allclose((T1 @ T1.inverse()).apply(p), p, atol=1e-9)


def test_canonical_hemisphere():
    T = RigidTransform(np.array([-0.5, 0.5, 0.5, 0.5]))
    assert T.q[0] >= 0
    assert abs(np.linalg.norm(T.q) - 1) < 1e-9


@pytest.mark.parametrize("scale", [1e-7, 1e-3, 0.5, 2.5])
def test_right_jacobians(scale):
    rng = np.random.default_rng(6)
    phi = rng.normal(size=3)
    phi *= scale / np.linalg.norm(phi)
    Jr = right_jacobian(phi)
    np.testing.assert_allclose(Jr @ right_jacobian_inv(phi), np.eye(3), atol=1e-10)
    h = 1e-6
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        # Exp(phi + d) = Exp(phi) Exp(Jr d)
        lhs = quat_mul(quat_conj(exp_rotvec(phi)), exp_rotvec(phi + d))
        np.testing.assert_allclose(log_quat(lhs) / h, Jr[:, i], atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_sym3_eigvalsh_matches_numpy(seed, scale):
    rng = np.random.default_rng(seed)
    B = rng.normal(scale=scale, size=(20, 3, 3))
    A = B @ B.transpose(0, 2, 1)
    # include exactly repeated and diagonal spectra
    A[0] = np.diag([2.0, 2.0, 5.0]) * scale
    A[1] = np.eye(3) * scale
    # the trigonometric root formula is accurate to about sqrt(eps) at repeated roots
    np.testing.assert_allclose(sym3_eigvalsh(A), np.linalg.eigvalsh(A), rtol=0, atol=1e-7 * np.abs(A).max())


def test_sym3_solve_matches_numpy():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(50, 3, 3))
    A = B @ B.transpose(0, 2, 1) + 0.1 * np.eye(3)
    b = rng.normal(size=(50, 3))
    np.testing.assert_allclose(sym3_solve(A, b), np.linalg.solve(A, b[..., None])[..., 0], rtol=1e-9, atol=1e-9)
