"""Rotation and rigid-transform arithmetic.

Quaternions are numpy arrays in ``[w, x, y, z]`` order (Hamilton product,
active rotations).  Every function accepts a single quaternion of shape
``(4,)`` or a batch of shape ``(..., 4)``; rotation vectors likewise use
``(3,)`` or ``(..., 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading dims."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        w, x, y, z = q.tolist()
        n = math.sqrt(w * w + x * x + y * y + z * z)
        return np.array([w / n, x / n, y / n, z / n])
    return q / np.sqrt(np.sum(q * q, axis=-1, keepdims=True))


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalize and flip to the w >= 0 hemisphere."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


quat_inv = quat_conj


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product ``q1 * q2``; the result is renormalized."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    if q1.ndim == 1 and q2.ndim == 1:
        # scalar path: the solver multiplies single quaternions many times per frame
        w1, x1, y1, z1 = q1.tolist()
        w2, x2, y2, z2 = q2.tolist()
        return quat_normalize(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    out = np.empty(np.broadcast_shapes(q1.shape, q2.shape))
    out[..., 0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    out[..., 1] = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    out[..., 2] = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    out[..., 3] = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    return quat_normalize(out)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    if q.ndim == 1:
        w, x, y, z = q.tolist()
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, single matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(np.array(q))


def exp_rotvec(v: np.ndarray) -> np.ndarray:
    """Rotation vector to unit quaternion.

    Below an angle of 1e-8 rad the half-angle sinc is replaced by its Taylor
    series so the identity is reached without a 0/0.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v.tolist()
        theta = math.sqrt(x * x + y * y + z * z)
        if theta < SMALL_ANGLE:
            k, w = 0.5 - theta**2 / 48.0, 1.0 - theta**2 / 8.0
        else:
            k, w = math.sin(0.5 * theta) / theta, math.cos(0.5 * theta)
        return quat_normalize(np.array([w, k * x, k * y, k * z]))
    theta = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(half))
    return quat_normalize(np.concatenate([w, k * v], axis=-1))


def log_quat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion to rotation vector with angle in [0, pi]."""
    q = quat_canonical(q)
    if q.ndim == 1:
        w, x, y, z = q.tolist()
        w = min(max(w, -1.0), 1.0)
        sin_half = math.sqrt(x * x + y * y + z * z)
        if sin_half < 0.5 * SMALL_ANGLE:
            k = 2.0 / w * (1.0 - sin_half**2 / (3.0 * w * w))
        else:
            k = 2.0 * math.atan2(sin_half, w) / sin_half
        return np.array([k * x, k * y, k * z])
    w = np.clip(q[..., :1], -1.0, 1.0)
    vec = q[..., 1:]
    sin_half = np.sqrt(np.sum(vec * vec, axis=-1, keepdims=True))
    theta = 2.0 * np.arctan2(sin_half, w)
    small = sin_half < 0.5 * SMALL_ANGLE
    safe = np.where(small, 1.0, sin_half)
    k = np.where(small, 2.0 / w * (1.0 - sin_half**2 / (3.0 * w * w)), theta / safe)
    return k * vec


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the rotation ``q`` to vector(s) ``v``."""
    return np.einsum("...ij,...j->...i", quat_to_rotmat(q), v)


def slerp(q1: np.ndarray, q2: np.ndarray, s) -> np.ndarray:
    """Shortest-arc spherical interpolation; ``s`` may be an array."""
    q1 = quat_normalize(q1)
    q2 = quat_normalize(q2)
    if np.dot(q1, q2) < 0.0:
        q2 = -q2
    delta = log_quat(quat_mul(quat_conj(q1), q2))
    s = np.asarray(s, dtype=float)[..., None]
    return quat_mul(q1, exp_rotvec(s * delta))


def rotation_angle(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Geodesic angle between two rotations (radians)."""
    return np.linalg.norm(log_quat(quat_mul(quat_conj(q1), q2)), axis=-1)


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """SO(3) right Jacobian: Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def gravity_aligned_quat(accel: np.ndarray) -> np.ndarray:
    """Attitude with zero yaw whose body z matches a measured specific force.

    ``accel`` is an accelerometer reading at rest, i.e. gravity reaction
    expressed in the body frame.
    """
    a = np.asarray(accel, dtype=float)
    a = a / np.linalg.norm(a)
    roll = np.arctan2(a[1], a[2])
    pitch = np.arctan2(-a[0], np.hypot(a[1], a[2]))
    q_pitch = exp_rotvec(np.array([0.0, pitch, 0.0]))
    q_roll = exp_rotvec(np.array([roll, 0.0, 0.0]))
    return quat_mul(q_pitch, q_roll)


def sym3_eigvalsh(A: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a stack of symmetric 3x3 matrices, closed form.

    Trigonometric solution of the characteristic cubic; much faster than a
    LAPACK call per matrix for large batches.
    """
    A = np.asarray(A, dtype=float)
    a00, a11, a22 = A[..., 0, 0], A[..., 1, 1], A[..., 2, 2]
    a01, a02, a12 = A[..., 0, 1], A[..., 0, 2], A[..., 1, 2]
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    p = np.sqrt((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1) / 6.0)
    safe = np.where(p > 0, p, 1.0)
    det = (b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)
           + a02 * (a01 * a12 - b11 * a02))
    r = np.clip(det / (2.0 * safe**3), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return np.stack([lo, mid, hi], axis=-1)


def sym3_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve stacked symmetric 3x3 systems by the adjugate."""
    A = np.asarray(A, dtype=float)
    c0 = np.cross(A[..., 1, :], A[..., 2, :])
    c1 = np.cross(A[..., 2, :], A[..., 0, :])
    c2 = np.cross(A[..., 0, :], A[..., 1, :])
    det = np.sum(A[..., 0, :] * c0, axis=-1)
    adj = np.stack([c0, c1, c2], axis=-1)
    return np.einsum("...ij,...j->...i", adj, b) / det[..., None]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``q`` followed by translation ``t``: x -> R(q) x + t."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``: (self * other)(x) = self(other(x))."""
        return RigidTransform(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        q_inv = quat_conj(self.q)
        return RigidTransform(q_inv, -(quat_to_rotmat(q_inv) @ self.t))

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def transform_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    return T.apply(p)
