"""IMU preintegration, state propagation and the IMU residual.

Both integrators use a zero-order hold: each sample is held constant until
the next sample time (or the batch end time).  Preintegration accumulates the
gravity-free relative motion (alpha, beta, gamma) expressed in the body frame
at the batch start; propagation integrates the full kinematic state and
cancels gravity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    IDENTITY_QUAT,
    RigidTransform,
    exp_rotvec,
    log_quat,
    quat_conj,
    quat_mul,
    quat_to_rotmat,
    right_jacobian,
    right_jacobian_inv,
    skew,
)

GRAVITY = np.array([0.0, 0.0, 9.81])


class ImuDataError(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray


@dataclass
class ImuNoise:
    """Continuous-time noise densities."""

    gyro: float = 1e-3  # rad/s/sqrt(Hz)
    accel: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_bias_rw: float = 1e-5
    accel_bias_rw: float = 1e-5


@dataclass
class ImuBatch:
    """Samples held over ``[t[0], t_end)``; sample m covers [t[m], t[m+1])."""

    t: np.ndarray
    omega: np.ndarray
    accel: np.ndarray
    t_end: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if len(self.t) == 0:
            raise ImuDataError("empty IMU batch")
        if np.any(np.diff(self.t) <= 0) or self.t_end < self.t[-1]:
            raise ImuDataError("IMU timestamps must be strictly increasing")

    @property
    def knots(self) -> np.ndarray:
        return np.append(self.t, self.t_end)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)

    @property
    def duration(self) -> float:
        return float(self.t_end - self.t[0])

    def __len__(self) -> int:
        return len(self.t)


class ImuStream:
    """Time-sorted IMU record with boundary interpolation."""

    def __init__(self, t, omega, accel):
        t = np.asarray(t, dtype=float)
        order = np.argsort(t, kind="stable")
        self.t = t[order]
        self.omega = np.asarray(omega, dtype=float).reshape(-1, 3)[order]
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)[order]
        if len(self.t) == 0:
            raise ImuDataError("empty IMU stream")
        if np.any(np.diff(self.t) <= 0):
            raise ImuDataError("duplicate IMU timestamps")

    def __len__(self) -> int:
        return len(self.t)

    def interpolate(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        omega = np.array([np.interp(t, self.t, self.omega[:, i]) for i in range(3)])
        accel = np.array([np.interp(t, self.t, self.accel[:, i]) for i in range(3)])
        return omega, accel

    def slice(self, t_start: float, t_end: float) -> ImuBatch:
        """Batch over ``[t_start, t_end)`` with an interpolated sample at t_start."""
        if t_end <= t_start:
            raise ImuDataError(f"bad IMU interval [{t_start}, {t_end})")
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="left")
        t = self.t[lo:hi]
        omega = self.omega[lo:hi]
        accel = self.accel[lo:hi]
        if len(t) == 0 or t[0] > t_start:
            w0, a0 = self.interpolate(t_start)
            t = np.concatenate([[t_start], t])
            omega = np.vstack([w0, omega])
            accel = np.vstack([a0, accel])
        return ImuBatch(t, omega, accel, t_end)

    def samples(self, t_start: float, t_end: float) -> np.ndarray:
        """Indices of raw samples with t_start <= t < t_end."""
        lo = np.searchsorted(self.t, t_start, side="left")
        hi = np.searchsorted(self.t, t_end, side="left")
        return np.arange(lo, hi)


@dataclass
class NavState:
    """Orientation, position, velocity and IMU biases at time ``t``."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.b_omega = np.asarray(self.b_omega, dtype=float)
        self.b_accel = np.asarray(self.b_accel, dtype=float)

    def copy(self) -> "NavState":
        return NavState(
            self.q.copy(), self.p.copy(), self.v.copy(),
            self.b_omega.copy(), self.b_accel.copy(), self.t,
        )

    def boxplus(self, dx: np.ndarray) -> "NavState":
        """Apply a 15-dim error state ordered (dtheta, dp, dv, db_omega, db_accel)."""
        return NavState(
            quat_mul(self.q, exp_rotvec(dx[0:3])),
            self.p + dx[3:6],
            self.v + dx[6:9],
            self.b_omega + dx[9:12],
            self.b_accel + dx[12:15],
            self.t,
        )

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(x)) for x in (self.q, self.p, self.v, self.b_omega, self.b_accel)
        )


@dataclass
class PreintObservation:
    """Relative-motion pseudo-observation between two consecutive states.

    ``jac_bias`` is 9x6 with rows (alpha, beta, gamma) and columns
    (b_omega, b_accel).  ``covariance`` is 15x15 ordered
    (alpha, beta, gamma, b_omega, b_accel).
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    duration: float
    ref_bias_omega: np.ndarray
    ref_bias_accel: np.ndarray
    covariance: np.ndarray
    jac_bias: np.ndarray
    _sqrt_info: np.ndarray | None = field(default=None, repr=False)

    @property
    def sqrt_info(self) -> np.ndarray:
        """Upper factor L with L^T L = covariance^-1."""
        if self._sqrt_info is None:
            P = 0.5 * (self.covariance + self.covariance.T)
            w, V = np.linalg.eigh(P)
            w = np.maximum(w, max(w.max(), 1e-30) * 1e-14)
            self._sqrt_info = (V / np.sqrt(w)).T
        return self._sqrt_info

    def corrected(self, b_omega: np.ndarray, b_accel: np.ndarray):
        """First-order bias-corrected (alpha, beta, gamma)."""
        db = np.concatenate([b_omega - self.ref_bias_omega, b_accel - self.ref_bias_accel])
        J = self.jac_bias
        alpha = self.alpha + J[0:3] @ db
        beta = self.beta + J[3:6] @ db
        gamma = quat_mul(self.gamma, exp_rotvec(J[6:9, 0:3] @ db[0:3]))
        return alpha, beta, gamma


def preintegrate(
    batch: ImuBatch,
    b_omega: np.ndarray,
    b_accel: np.ndarray,
    noise: ImuNoise | None = None,
) -> PreintObservation:
    noise = noise or ImuNoise()
    b_omega = np.asarray(b_omega, dtype=float)
    b_accel = np.asarray(b_accel, dtype=float)
    if not (np.all(np.isfinite(b_omega)) and np.all(np.isfinite(b_accel))):
        raise ImuDataError("non-finite bias")

    gamma = IDENTITY_QUAT.copy()
    beta = np.zeros(3)
    alpha = np.zeros(3)
    J = np.zeros((9, 6))
    P = np.zeros((15, 15))
    I3 = np.eye(3)

    for dt, w, a in zip(batch.dt, batch.omega, batch.accel):
        if dt <= 0.0:
            continue
        w_bar = w - b_omega
        a_bar = a - b_accel
        R = quat_to_rotmat(gamma)
        Ra = R @ a_bar
        phi = w_bar * dt
        dR = quat_to_rotmat(exp_rotvec(phi))
        Jr = right_jacobian(phi)
        R_ax = R @ skew(a_bar)

        # bias Jacobians of the discrete recursion (uses step-m values)
        J_gw = J[6:9, 0:3]
        J_new = J.copy()
        J_new[0:3, 0:3] = J[0:3, 0:3] + dt * J[3:6, 0:3] - 0.5 * dt * dt * R_ax @ J_gw
        J_new[0:3, 3:6] = J[0:3, 3:6] + dt * J[3:6, 3:6] - 0.5 * dt * dt * R
        J_new[3:6, 0:3] = J[3:6, 0:3] - dt * R_ax @ J_gw
        J_new[3:6, 3:6] = J[3:6, 3:6] - dt * R
        J_new[6:9, 0:3] = dR.T @ J_gw - Jr * dt

        A = np.eye(15)
        A[0:3, 3:6] = dt * I3
        A[0:3, 6:9] = -0.5 * dt * dt * R_ax
        A[0:3, 12:15] = -0.5 * dt * dt * R
        A[3:6, 6:9] = -dt * R_ax
        A[3:6, 12:15] = -dt * R
        A[6:9, 6:9] = dR.T
        A[6:9, 9:12] = -Jr * dt
        B = np.zeros((15, 12))
        B[0:3, 3:6] = -0.5 * dt * dt * R
        B[3:6, 3:6] = -dt * R
        B[6:9, 0:3] = -Jr * dt
        B[9:12, 6:9] = I3
        B[12:15, 9:12] = I3
        Q = np.diag(
            np.repeat(
                [
                    noise.gyro**2 / dt,
                    noise.accel**2 / dt,
                    noise.gyro_bias_rw**2 * dt,
                    noise.accel_bias_rw**2 * dt,
                ],
                3,
            )
        )
        P = A @ P @ A.T + B @ Q @ B.T
        P = 0.5 * (P + P.T)

        alpha = alpha + dt * beta + 0.5 * dt * dt * Ra
        beta = beta + dt * Ra
        gamma = quat_mul(gamma, exp_rotvec(phi))
        J = J_new

    return PreintObservation(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        duration=float(np.sum(batch.dt)),
        ref_bias_omega=b_omega.copy(),
        ref_bias_accel=b_accel.copy(),
        covariance=P,
        jac_bias=J,
    )


@dataclass
class PropagatedStates:
    """Propagated (q, p, v) at every knot of the source batch."""

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    batch: ImuBatch
    b_omega: np.ndarray
    b_accel: np.ndarray
    gravity: np.ndarray

    def pose_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(q, p, v) at time t, integrating the held sample inside a knot interval."""
        if t < self.t[0] - 1e-12 or t > self.t[-1] + 1e-12:
            raise ValueError(f"time {t} outside propagated range [{self.t[0]}, {self.t[-1]}]")
        m = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2))
        h = t - self.t[m]
        if h <= 0.0:
            return self.q[m].copy(), self.p[m].copy(), self.v[m].copy()
        if m + 1 == len(self.t) - 1 and abs(t - self.t[-1]) <= 1e-12:
            return self.q[-1].copy(), self.p[-1].copy(), self.v[-1].copy()
        return _zoh_step(
            self.q[m], self.p[m], self.v[m],
            self.batch.omega[m] - self.b_omega,
            self.batch.accel[m] - self.b_accel,
            h, self.gravity,
        )

    def state_at(self, t: float, template: NavState) -> NavState:
        q, p, v = self.pose_at(t)
        return NavState(q, p, v, template.b_omega.copy(), template.b_accel.copy(), t)


def _zoh_step(q, p, v, w_bar, a_bar, dt, g):
    acc = quat_to_rotmat(q) @ a_bar - g
    p_new = p + dt * v + 0.5 * dt * dt * acc
    v_new = v + dt * acc
    q_new = quat_mul(q, exp_rotvec(w_bar * dt))
    return q_new, p_new, v_new


def propagate(seed: NavState, batch: ImuBatch, gravity: np.ndarray = GRAVITY) -> PropagatedStates:
    g = np.asarray(gravity, dtype=float)
    n = len(batch)
    q = np.empty((n + 1, 4))
    p = np.empty((n + 1, 3))
    v = np.empty((n + 1, 3))
    q[0], p[0], v[0] = seed.q, seed.p, seed.v
    for m, dt in enumerate(batch.dt):
        q[m + 1], p[m + 1], v[m + 1] = _zoh_step(
            q[m], p[m], v[m],
            batch.omega[m] - seed.b_omega,
            batch.accel[m] - seed.b_accel,
            dt, g,
        )
    return PropagatedStates(
        batch.knots, q, p, v, batch, seed.b_omega.copy(), seed.b_accel.copy(), g
    )


def relative_transform(prop: PropagatedStates, t_a: float, t_b: float) -> RigidTransform:
    """Pose of the body at ``t_b`` expressed in the body frame at ``t_a``."""
    qa, pa, _ = prop.pose_at(t_a)
    qb, pb, _ = prop.pose_at(t_b)
    return RigidTransform(quat_mul(quat_conj(qa), qb), quat_to_rotmat(qa).T @ (pb - pa))


def imu_residual(
    prev: NavState,
    curr: NavState,
    obs: PreintObservation,
    gravity: np.ndarray = GRAVITY,
    jacobians: bool = False,
):
    """15-dim residual ordered (alpha, beta, gamma, db_omega, db_accel).

    With ``jacobians=True`` also returns the 15x15 Jacobians with respect to
    the error states of ``prev`` and ``curr``.
    """
    g = np.asarray(gravity, dtype=float)
    T = obs.duration
    Ri = quat_to_rotmat(prev.q)
    Rj = quat_to_rotmat(curr.q)
    dp = curr.p - prev.p - prev.v * T + 0.5 * g * T * T
    dv = curr.v - prev.v + g * T

    alpha_c, beta_c, gamma_c = obs.corrected(prev.b_omega, prev.b_accel)
    q_err = quat_mul(quat_conj(gamma_c), quat_mul(quat_conj(prev.q), curr.q))
    r_gamma = log_quat(q_err)

    r = np.concatenate(
        [
            Ri.T @ dp - alpha_c,
            Ri.T @ dv - beta_c,
            r_gamma,
            curr.b_omega - prev.b_omega,
            curr.b_accel - prev.b_accel,
        ]
    )
    if not jacobians:
        return r

    J = obs.jac_bias
    I3 = np.eye(3)
    Jr_inv = right_jacobian_inv(r_gamma)
    E = quat_to_rotmat(q_err)
    phi = J[6:9, 0:3] @ (prev.b_omega - obs.ref_bias_omega)

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[0:3, 0:3] = skew(Ri.T @ dp)
    Ji[0:3, 3:6] = -Ri.T
    Ji[0:3, 6:9] = -Ri.T * T
    Ji[0:3, 9:12] = -J[0:3, 0:3]
    Ji[0:3, 12:15] = -J[0:3, 3:6]
    Ji[3:6, 0:3] = skew(Ri.T @ dv)
    Ji[3:6, 6:9] = -Ri.T
    Ji[3:6, 9:12] = -J[3:6, 0:3]
    Ji[3:6, 12:15] = -J[3:6, 3:6]
    Ji[6:9, 0:3] = -Jr_inv @ Rj.T @ Ri
    Ji[6:9, 9:12] = -Jr_inv @ E.T @ right_jacobian(phi) @ J[6:9, 0:3]
    Ji[9:12, 9:12] = -I3
    Ji[12:15, 12:15] = -I3

    Jj[0:3, 3:6] = Ri.T
    Jj[3:6, 6:9] = Ri.T
    Jj[6:9, 0:3] = Jr_inv
    Jj[9:12, 9:12] = I3
    Jj[12:15, 12:15] = I3
    return r, Ji, Jj


def preintegration_consistent_state(
    prev: NavState, obs: PreintObservation, gravity: np.ndarray = GRAVITY
) -> NavState:
    """The state at the end of ``obs`` implied exactly by ``prev``."""
    g = np.asarray(gravity, dtype=float)
    T = obs.duration
    alpha, beta, gamma = obs.corrected(prev.b_omega, prev.b_accel)
    Ri = quat_to_rotmat(prev.q)
    return NavState(
        quat_mul(prev.q, gamma),
        prev.p + prev.v * T - 0.5 * g * T * T + Ri @ alpha,
        prev.v - g * T + Ri @ beta,
        prev.b_omega.copy(),
        prev.b_accel.copy(),
        prev.t + T,
    )


def with_time(state: NavState, t: float) -> NavState:
    return replace(state.copy(), t=t)
