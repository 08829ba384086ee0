"""Sliding-window joint IMU and lidar optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .frontend import FeatureCloud
from .imu import GRAVITY, ImuStream, NavState, PreintObservation, imu_residual, propagate
from .matching import FmmSet, lidar_residual

log = logging.getLogger(__name__)

STATE_DIM = 15


class EstimationDivergence(RuntimeError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 8
    function_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-8
    initial_radius: float = 1e4
    huber_delta: float = 1.0
    lidar_sigma: float = 0.01


# ---------------------------------------------------------------- window


@dataclass
class SlidingWindow:
    """Up to ``size`` consecutive states with their clouds.

    ``preints[i]`` links ``states[i - 1]`` to ``states[i]``; ``preints[0]``
    is kept from when the oldest state was itself the newest, but no factor
    is built from it once its predecessor has left the window.
    """

    size: int = 10
    states: list[NavState] = field(default_factory=list)
    cfcs: list[FeatureCloud | None] = field(default_factory=list)
    preints: list[PreintObservation | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def full(self) -> bool:
        return len(self.states) >= self.size

    @property
    def newest(self) -> NavState:
        return self.states[-1]

    @property
    def middle_index(self) -> int:
        """Window index of state v = k - floor(M / 2)."""
        return len(self.states) - 1 - self.size // 2


def slide_window(window: SlidingWindow, seed: NavState, cfc: FeatureCloud | None,
                 preint: PreintObservation | None, tol: float = 1e-6):
    """Append a new state; drop and return the oldest once the window overflows."""
    if window.states:
        last = window.states[-1]
        if seed.t <= last.t:
            raise ValueError("window timestamps must increase")
        if preint is None or abs(last.t + preint.duration - seed.t) > tol:
            raise ValueError("preintegration does not span the new interval")
    window.states.append(seed)
    window.cfcs.append(cfc)
    window.preints.append(preint)
    dropped = None
    if len(window.states) > window.size:
        dropped = (window.states.pop(0), window.cfcs.pop(0))
        window.preints.pop(0)
    return dropped


def predict(latest: NavState, imu: ImuStream, t: float, gravity=GRAVITY) -> NavState:
    """IMU-propagated state at time ``t`` from the newest optimized state."""
    if t < latest.t - 1e-12:
        raise ValueError("cannot predict before the latest optimized state")
    if t <= latest.t:
        return latest.copy()
    prop = propagate(latest, imu.slice(latest.t, t), gravity)
    return prop.state_at(t, latest)


# ---------------------------------------------------------------- problem


def huber(s: np.ndarray, delta: float = 1.0):
    """rho(s) and rho'(s) on squared residual s."""
    d2 = delta * delta
    inlier = s <= d2
    root = np.sqrt(np.maximum(s, d2))
    rho = np.where(inlier, s, 2.0 * delta * root - d2)
    drho = np.where(inlier, 1.0, delta / root)
    return rho, drho


@dataclass
class JointProblem:
    """IMU factors between consecutive states and unary lidar factors.

    Cost: sum ||r_I||^2 weighted by the preintegration information, plus
    sum rho((r_L / sigma)^2) with Huber rho.
    """

    states: list[NavState]
    imu_factors: list[tuple[int, int, PreintObservation]]
    lidar_factors: list[FmmSet]
    cfg: SolverConfig = field(default_factory=SolverConfig)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    diagnostics: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return STATE_DIM * len(self.states)

    @property
    def lidar_factor_count(self) -> int:
        return sum(len(f) for f in self.lidar_factors)

    def imu_costs(self, states):
        out = []
        for i, j, obs in self.imu_factors:
            r = obs.sqrt_info @ imu_residual(states[i], states[j], obs, self.gravity)
            out.append(float(r @ r))
        return out

    def lidar_costs(self, states):
        out = []
        w = 1.0 / self.cfg.lidar_sigma
        for m, fmm in enumerate(self.lidar_factors):
            if len(fmm) == 0:
                out.append(np.zeros(0))
                continue
            r = lidar_residual(states[m].q, states[m].p, fmm) * w
            out.append(huber(r * r, self.cfg.huber_delta)[0])
        return out

    def cost(self, states=None) -> float:
        states = self.states if states is None else states
        return float(sum(self.imu_costs(states)) + sum(c.sum() for c in self.lidar_costs(states)))

    def linearize(self, states=None):
        """Gauss-Newton system (H, b, cost) with H = J^T W J and b = J^T W r."""
        states = self.states if states is None else states
        n = self.dim
        H = np.zeros((n, n))
        b = np.zeros(n)
        cost = 0.0
        for i, j, obs in self.imu_factors:
            r, Ji, Jj = imu_residual(states[i], states[j], obs, self.gravity, jacobians=True)
            L = obs.sqrt_info
            r = L @ r
            A = np.hstack([L @ Ji, L @ Jj])
            cost += float(r @ r)
            idx = np.r_[STATE_DIM * i:STATE_DIM * (i + 1), STATE_DIM * j:STATE_DIM * (j + 1)]
            H[np.ix_(idx, idx)] += A.T @ A
            b[idx] += A.T @ r
        w = 1.0 / self.cfg.lidar_sigma
        for m, fmm in enumerate(self.lidar_factors):
            if len(fmm) == 0:
                continue
            r, J = lidar_residual(states[m].q, states[m].p, fmm, jacobian=True)
            r = r * w
            J = J * w
            rho, drho = huber(r * r, self.cfg.huber_delta)
            cost += float(rho.sum())
            sl = slice(STATE_DIM * m, STATE_DIM * m + 6)
            H[sl, sl] += (J * drho[:, None]).T @ J
            b[sl] += J.T @ (drho * r)
        return H, b, cost


def build_problem(window: SlidingWindow, fmm: list[FmmSet], cfg: SolverConfig | None = None,
                  gravity=GRAVITY) -> JointProblem:
    if len(fmm) != len(window):
        raise ValueError("one matching set per window state is required")
    factors = [(i - 1, i, window.preints[i]) for i in range(1, len(window)) if window.preints[i] is not None]
    problem = JointProblem([s.copy() for s in window.states], factors, list(fmm), cfg or SolverConfig(),
                           np.asarray(gravity, dtype=float))
    anchored = {i for i, j, _ in factors} | {j for i, j, _ in factors}
    loose = [m for m, f in enumerate(fmm) if len(f) == 0 and m not in anchored]
    if loose and len(window) > 1:
        log.warning("states %s have neither lidar factors nor IMU links", loose)
    problem.diagnostics["under_constrained"] = loose
    return problem


# ---------------------------------------------------------------- solver


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted: int
    costs: list[float]
    termination: str


def _retract(states, dx):
    return [s.boxplus(dx[STATE_DIM * m:STATE_DIM * (m + 1)]) for m, s in enumerate(states)]


def optimize(problem: JointProblem, cfg: SolverConfig | None = None):
    """Levenberg-Marquardt on the error state; returns (states, report).

    Steps are accepted only when the total cost decreases.  Orientation
    updates are applied multiplicatively through the exponential map.
    """
    cfg = cfg or problem.cfg
    states = problem.states
    H, b, cost = problem.linearize(states)
    if not np.isfinite(cost):
        raise EstimationDivergence("non-finite initial cost")
    report = SolveReport(cost, cost, 0, 0, [cost], "max_iterations")
    radius = cfg.initial_radius
    nu = 2.0
    for it in range(cfg.max_iterations):
        if np.max(np.abs(b), initial=0.0) <= cfg.gradient_tolerance:
            report.termination = "gradient"
            break
        report.iterations = it + 1
        D = np.clip(np.diag(H), 1e-6, 1e32)
        try:
            dx = np.linalg.solve(H + np.diag(D / radius), -b)
        except np.linalg.LinAlgError:
            radius /= nu
            nu *= 2
            continue
        scale = np.linalg.norm(np.concatenate([np.r_[s.p, s.v, s.b_omega, s.b_accel] for s in states]))
        if np.linalg.norm(dx) <= cfg.parameter_tolerance * (scale + cfg.parameter_tolerance):
            report.termination = "parameter"
            break
        candidate = _retract(states, dx)
        new_cost = problem.cost(candidate)
        if not np.isfinite(new_cost):
            raise EstimationDivergence("non-finite cost during optimization")
        predicted = -(2.0 * b @ dx + dx @ H @ dx)
        actual = cost - new_cost
        if actual > 0 and predicted > 0:
            gain = actual / predicted
            states = candidate
            report.accepted += 1
            report.costs.append(new_cost)
            radius = radius / max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
            converged = actual <= cfg.function_tolerance * cost
            H, b, cost = problem.linearize(states)
            if converged:
                report.termination = "function"
                break
        else:
            radius /= nu
            nu *= 2.0
    report.final_cost = cost
    return states, report


# ---------------------------------------------------------------- observability


def position_information(H: np.ndarray, index: int, reg: float = 1e-9):
    """Information on one state's position after marginalizing everything else.

    Returns eigenvalues (ascending) and eigenvectors of the Schur complement.
    A tiny diagonal regularization keeps the marginalized block invertible
    when the problem has gauge freedoms.
    """
    n = H.shape[0]
    keep = np.arange(STATE_DIM * index + 3, STATE_DIM * index + 6)
    rest = np.setdiff1d(np.arange(n), keep)
    Hrr = H[np.ix_(rest, rest)]
    Hrr = Hrr + reg * max(np.trace(Hrr) / max(len(rest), 1), 1.0) * np.eye(len(rest))
    S = H[np.ix_(keep, keep)] - H[np.ix_(keep, rest)] @ np.linalg.solve(Hrr, H[np.ix_(rest, keep)])
    return np.linalg.eigh(0.5 * (S + S.T))
