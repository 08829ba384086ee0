"""Synthetic worlds, trajectories, spinning lidars and IMUs with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .geometry import exp_rotvec, log_quat, quat_conj, quat_mul, quat_to_rotmat
from .imu import GRAVITY, ImuStream

# ---------------------------------------------------------------- trajectories


@dataclass
class Component:
    """offset + rate * s + sum_i amp_i * sin(freq_i * s + phase_i), s = warped time."""

    offset: float = 0.0
    rate: float = 0.0
    amps: tuple = ()
    freqs: tuple = ()
    phases: tuple = ()

    def eval(self, s: np.ndarray):
        s = np.asarray(s, dtype=float)
        c = self.offset + self.rate * s
        d1 = np.full_like(s, self.rate)
        d2 = np.zeros_like(s)
        for a, f, ph in zip(self.amps, self.freqs, self.phases):
            arg = f * s + ph
            c = c + a * np.sin(arg)
            d1 = d1 + a * f * np.cos(arg)
            d2 = d2 - a * f * f * np.sin(arg)
        return c, d1, d2


@dataclass
class TrajectorySpec:
    """Analytic body pose in the world frame.

    Position components and ZYX Euler angles are sinusoid sums of a warped
    time s(t) whose first two derivatives vanish at t = 0, so the body starts
    at rest with zero acceleration.  ``ramp`` sets the warp time constant.
    """

    x: Component = field(default_factory=Component)
    y: Component = field(default_factory=Component)
    z: Component = field(default_factory=Component)
    roll: Component = field(default_factory=Component)
    pitch: Component = field(default_factory=Component)
    yaw: Component = field(default_factory=Component)
    ramp: float = 2.0

    def _warp(self, t):
        t = np.asarray(t, dtype=float)
        if self.ramp <= 0:
            return t, np.ones_like(t), np.zeros_like(t)
        u = t / self.ramp
        g = np.exp(-u * u)
        s = t - self.ramp * np.sqrt(np.pi) / 2.0 * erf(u)
        return s, 1.0 - g, 2.0 * t / self.ramp**2 * g

    def _eval(self, comp: Component, t):
        s, s1, s2 = self._warp(t)
        c, c1, c2 = comp.eval(s)
        return c, c1 * s1, c2 * s1 * s1 + c1 * s2

    def position(self, t):
        return np.stack([self._eval(c, t)[0] for c in (self.x, self.y, self.z)], axis=-1)

    def velocity(self, t):
        return np.stack([self._eval(c, t)[1] for c in (self.x, self.y, self.z)], axis=-1)

    def acceleration(self, t):
        return np.stack([self._eval(c, t)[2] for c in (self.x, self.y, self.z)], axis=-1)

    def euler(self, t):
        return [self._eval(c, t)[:2] for c in (self.roll, self.pitch, self.yaw)]

    def orientation(self, t):
        (r, _), (p, _), (y, _) = self.euler(t)
        zeros = np.zeros_like(np.asarray(r))
        qz = exp_rotvec(np.stack([zeros, zeros, y], axis=-1))
        qy = exp_rotvec(np.stack([zeros, p, zeros], axis=-1))
        qx = exp_rotvec(np.stack([r, zeros, zeros], axis=-1))
        return quat_mul(qz, quat_mul(qy, qx))

    def angular_velocity(self, t):
        """Body-frame angular rate."""
        (r, dr), (p, dp), (_, dy) = self.euler(t)
        return np.stack(
            [
                dr - dy * np.sin(p),
                dp * np.cos(r) + dy * np.cos(p) * np.sin(r),
                -dp * np.sin(r) + dy * np.cos(p) * np.cos(r),
            ],
            axis=-1,
        )


def figure_eight(period: float = 30.0, size=(2.0, 1.2, 0.3), height: float = 1.8,
                 yaw_amp: float = 0.6, tilt_deg: float = 3.0, ramp: float = 2.0) -> TrajectorySpec:
    w = 2 * np.pi / period
    tilt = np.deg2rad(tilt_deg)
    return TrajectorySpec(
        x=Component(0.0, 0.0, (size[0],), (w,), (0.0,)),
        y=Component(0.0, 0.0, (size[1],), (2 * w,), (0.0,)),
        z=Component(height, 0.0, (size[2],), (w,), (0.5,)),
        roll=Component(0.0, 0.0, (tilt,), (2 * w,), (0.3,)),
        pitch=Component(0.0, 0.0, (tilt,), (w,), (1.1,)),
        yaw=Component(0.2, 0.0, (yaw_amp,), (w,), (0.0,)),
        ramp=ramp,
    )


def random_trajectory(rng: np.random.Generator, pos_amp=1.0, ang_amp=0.3, max_freq=1.5,
                      n_terms=2, ramp=0.0) -> TrajectorySpec:
    def comp(amp, offset=0.0):
        return Component(
            offset, 0.0,
            tuple(rng.uniform(-amp, amp, n_terms)),
            tuple(rng.uniform(0.2, max_freq, n_terms)),
            tuple(rng.uniform(0, 2 * np.pi, n_terms)),
        )

    return TrajectorySpec(
        comp(pos_amp), comp(pos_amp), comp(pos_amp),
        comp(ang_amp), comp(ang_amp), comp(ang_amp, rng.uniform(-np.pi, np.pi)),
        ramp=ramp,
    )


# ---------------------------------------------------------------- world


@dataclass
class Patch:
    """Rectangle corner + u*e1 + v*e2, u, v in [0, 1]; e1 and e2 orthogonal."""

    corner: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=float)
        self.e1 = np.asarray(self.e1, dtype=float)
        self.e2 = np.asarray(self.e2, dtype=float)
        if abs(np.dot(self.e1, self.e2)) > 1e-9 * np.linalg.norm(self.e1) * np.linalg.norm(self.e2):
            raise ValueError("patch edge vectors must be orthogonal")
        if np.linalg.norm(np.cross(self.e1, self.e2)) == 0:
            raise ValueError("degenerate patch")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the patch's supporting plane."""
        return np.abs((np.asarray(points) - self.corner) @ self.normal)


@dataclass
class WorldModel:
    patches: list[Patch] = field(default_factory=list)
    edges: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def add_box(self, lo, hi, skip=()):
        """Axis-aligned box as six patches (optionally skipping faces by name)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dx, dy, dz = hi - lo
        X, Y, Z = np.eye(3)
        faces = {
            "x-": Patch(lo, dy * Y, dz * Z),
            "x+": Patch(lo + dx * X, dy * Y, dz * Z),
            "y-": Patch(lo, dx * X, dz * Z),
            "y+": Patch(lo + dy * Y, dx * X, dz * Z),
            "z-": Patch(lo, dx * X, dy * Y),
            "z+": Patch(lo + dz * Z, dx * X, dy * Y),
        }
        for name, patch in faces.items():
            if name not in skip:
                self.patches.append(patch)
        corners = [lo + np.array([i, j, k]) * (hi - lo) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        for a in range(8):
            for b in range(a + 1, 8):
                if np.count_nonzero(np.abs(corners[a] - corners[b]) > 0) == 1:
                    self.edges.append((corners[a], corners[b]))
        return self

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest patch (clamped to the rectangle)."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        best = np.full(len(points), np.inf)
        for patch in self.patches:
            rel = points - patch.corner
            u = np.clip(rel @ patch.e1 / (patch.e1 @ patch.e1), 0, 1)
            v = np.clip(rel @ patch.e2 / (patch.e2 @ patch.e2), 0, 1)
            foot = patch.corner + u[:, None] * patch.e1 + v[:, None] * patch.e2
            best = np.minimum(best, np.linalg.norm(points - foot, axis=1))
        return best

    def edge_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        best = np.full(len(points), np.inf)
        for a, b in self.edges:
            d = b - a
            u = np.clip((points - a) @ d / (d @ d), 0, 1)
            best = np.minimum(best, np.linalg.norm(points - (a + u[:, None] * d), axis=1))
        return best

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float = 100.0) -> np.ndarray:
        """Range to first hit for unit rays; inf where nothing is hit."""
        best = np.full(len(dirs), np.inf)
        for patch in self.patches:
            n = np.cross(patch.e1, patch.e2)
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = ((patch.corner - origins) @ n) / denom
            ok = np.isfinite(lam) & (lam > 1e-6) & (lam < best)
            if not np.any(ok):
                continue
            hit = origins[ok] + lam[ok, None] * dirs[ok]
            rel = hit - patch.corner
            u = rel @ patch.e1 / (patch.e1 @ patch.e1)
            v = rel @ patch.e2 / (patch.e2 @ patch.e2)
            inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
            idx = np.flatnonzero(ok)[inside]
            best[idx] = lam[ok][inside]
        best[best > max_range] = np.inf
        return best


def room_world(size=(12.0, 8.0, 4.0), seed: int = 0) -> WorldModel:
    """Closed room centred on the origin (floor at z=0) with two pillars."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    world = WorldModel()
    world.add_box([-sx / 2, -sy / 2, 0.0], [sx / 2, sy / 2, sz])
    for cx, cy, w, d in ((3.5, 2.2, 0.6, 0.6), (-3.8, -2.0, 0.8, 0.5)):
        cx += rng.uniform(-0.3, 0.3)
        cy += rng.uniform(-0.3, 0.3)
        world.add_box([cx - w / 2, cy - d / 2, 0.0], [cx + w / 2, cy + d / 2, sz], skip=("z-", "z+"))
    return world


def facade_world(seed: int = 0) -> WorldModel:
    """A tall facade with protruding vertical pillars plus a bounded ground patch.

    Every surface visible from the side is vertical and extends far above
    and below the flight band, so side-looking returns carry no height
    information.
    """
    rng = np.random.default_rng(seed)
    world = WorldModel()
    wall_x, height = 8.0, 60.0
    world.patches.append(Patch([wall_x, -30.0, -20.0], [0, 60.0, 0], [0, 0, height + 20.0]))
    for y in np.arange(-24.0, 25.0, 6.0) + rng.uniform(-0.5, 0.5):
        depth = rng.uniform(0.4, 0.8)
        width = rng.uniform(0.6, 1.0)
        world.add_box([wall_x - depth, y, -20.0], [wall_x, y + width, height], skip=("z-", "z+", "x+"))
    world.patches.append(Patch([-12.0, -12.0, 0.0], [20.0, 0, 0], [0, 24.0, 0]))
    return world


# ---------------------------------------------------------------- sensors


@dataclass
class LidarConfig:
    lidar_id: int = 1
    channels: int = 16
    vertical_fov_deg: float = 32.0
    horizontal_res_deg: float = 0.4
    period: float = 0.1
    time_offset: float = 0.0
    mounting: str = "horizontal"
    translation: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.01
    min_range: float = 0.3
    max_range: float = 100.0

    @property
    def extrinsic_quat(self) -> np.ndarray:
        if self.mounting == "horizontal":
            return np.array([1.0, 0.0, 0.0, 0.0])
        if self.mounting == "vertical":
            return exp_rotvec([np.pi / 2, 0.0, 0.0])
        raise ValueError(f"unknown mounting {self.mounting!r}")

    @property
    def columns(self) -> int:
        return int(round(360.0 / self.horizontal_res_deg))

    def sensor_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """(columns, channels, 3) unit directions in the sensor frame and ring ids."""
        el = np.deg2rad(np.linspace(-self.vertical_fov_deg / 2, self.vertical_fov_deg / 2, self.channels))
        az = 2 * np.pi * np.arange(self.columns) / self.columns
        A, E = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        rings = np.broadcast_to(np.arange(self.channels), A.shape)
        return d, rings


@dataclass
class RawScan:
    """One lidar sweep in the body frame with per-point ring and time offset."""

    lidar_id: int
    t_start: float
    t_end: float
    channel_count: int
    ring: np.ndarray
    dt: np.ndarray
    xyz: np.ndarray

    def __post_init__(self):
        self.ring = np.asarray(self.ring, dtype=np.int64)
        self.dt = np.asarray(self.dt, dtype=float)
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.dt)


def simulate_lidar(world: WorldModel, traj: TrajectorySpec, cfg: LidarConfig, sweep: int,
                   rng: np.random.Generator | None = None) -> RawScan:
    """Ray-cast one sweep; each column fires from the true pose at its own time."""
    t_start = cfg.time_offset + sweep * cfg.period
    ncol = cfg.columns
    col_dt = cfg.period * np.arange(ncol) / ncol
    t = t_start + col_dt
    q_wb = traj.orientation(t)
    p_wb = traj.position(t)
    R_wb = quat_to_rotmat(q_wb)
    R_bs = quat_to_rotmat(cfg.extrinsic_quat)
    t_bs = np.asarray(cfg.translation, dtype=float)

    d_sensor, rings = cfg.sensor_directions()
    d_body = d_sensor @ R_bs.T
    d_world = np.einsum("cij,ckj->cki", R_wb, d_body)
    o_world = p_wb + np.einsum("cij,j->ci", R_wb, t_bs)
    o_world = np.broadcast_to(o_world[:, None, :], d_world.shape)

    rng_ = world.raycast(o_world.reshape(-1, 3), d_world.reshape(-1, 3), cfg.max_range)
    rng_ = rng_.reshape(ncol, cfg.channels)
    hit = np.isfinite(rng_) & (rng_ > cfg.min_range)
    if cfg.noise_sigma > 0:
        rng = rng or np.random.default_rng()
        rng_ = rng_ + rng.normal(scale=cfg.noise_sigma, size=rng_.shape)

    rng_ = np.where(hit, rng_, 0.0)
    xyz = t_bs + d_body * rng_[..., None]
    dt = np.broadcast_to(col_dt[:, None], rng_.shape)
    # ring-major order, each ring sorted by firing time
    xyz = np.swapaxes(xyz, 0, 1)[np.swapaxes(hit, 0, 1)]
    dt = dt.T[hit.T]
    ring = rings.T[hit.T]
    return RawScan(cfg.lidar_id, t_start, t_start + cfg.period, cfg.channels, ring, dt, xyz)


@dataclass
class ImuNoiseSpec:
    gyro: float = 1e-3
    accel: float = 1e-2
    gyro_bias_rw: float = 1e-5
    accel_bias_rw: float = 1e-5
    gyro_bias0: tuple = (0.0, 0.0, 0.0)
    accel_bias0: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def noiseless(cls) -> "ImuNoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0)


def simulate_imu(traj: TrajectorySpec, duration: float, rate: float = 200.0,
                 noise: ImuNoiseSpec | None = None, rng: np.random.Generator | None = None,
                 gravity: np.ndarray = GRAVITY, t0: float = 0.0) -> ImuStream:
    """IMU samples whose zero-order hold reproduces the true motion increments.

    Sample m describes the interval [t_m, t_m + dt): the gyro reports the
    mean rate Log(R_m^T R_m+1) / dt and the accelerometer the mean specific
    force R_m^T ((v_m+1 - v_m) / dt + g), as an integrating sensor would.
    Holding these values over the interval recovers the true attitude and
    velocity at every sample time exactly.  Biases follow a random walk;
    white noise is added per sample.
    """
    noise = noise or ImuNoiseSpec()
    rng = rng or np.random.default_rng()
    n = int(round(duration * rate)) + 1
    dt = 1.0 / rate
    knots = t0 + np.arange(n + 1) / rate
    q = traj.orientation(knots)
    v = traj.velocity(knots)
    R = quat_to_rotmat(q[:-1])
    omega = log_quat(quat_mul(quat_conj(q[:-1]), q[1:])) / dt
    accel = np.einsum("nji,nj->ni", R, np.diff(v, axis=0) / dt + gravity)

    def bias(b0, rw):
        b0 = np.asarray(b0, dtype=float)
        if not rw:
            return np.broadcast_to(b0, (n, 3))
        steps = rng.normal(scale=rw * np.sqrt(dt), size=(n, 3))
        steps[0] = 0.0
        return b0 + np.cumsum(steps, axis=0)

    omega = omega + bias(noise.gyro_bias0, noise.gyro_bias_rw)
    accel = accel + bias(noise.accel_bias0, noise.accel_bias_rw)
    if noise.gyro:
        omega = omega + rng.normal(scale=noise.gyro / np.sqrt(dt), size=(n, 3))
    if noise.accel:
        accel = accel + rng.normal(scale=noise.accel / np.sqrt(dt), size=(n, 3))
    return ImuStream(knots[:-1], omega, accel)


# ---------------------------------------------------------------- scenarios


@dataclass
class Scenario:
    name: str
    world: WorldModel
    traj: TrajectorySpec
    lidars: list[LidarConfig]
    duration: float
    imu_rate: float = 200.0
    imu_noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec)
    seed: int = 0

    def scans(self, lidar: LidarConfig, rng: np.random.Generator | None = None):
        n = int(np.floor((self.duration - lidar.time_offset) / lidar.period + 1e-9))
        for k in range(n):
            yield simulate_lidar(self.world, self.traj, lidar, k, rng)

    def ground_truth(self, rate: float | None = None):
        rate = rate or self.imu_rate
        t = np.arange(int(round(self.duration * rate)) + 1) / rate
        return t, self.traj.position(t), self.traj.orientation(t)

    def imu(self, rng: np.random.Generator | None = None) -> ImuStream:
        return simulate_imu(self.traj, self.duration + 0.5, self.imu_rate, self.imu_noise, rng)


def default_lidars(noise_sigma: float = 0.01, horizontal_res_deg: float = 0.4) -> list[LidarConfig]:
    return [
        LidarConfig(1, mounting="horizontal", translation=(0.0, 0.0, 0.1),
                    noise_sigma=noise_sigma, horizontal_res_deg=horizontal_res_deg),
        LidarConfig(2, mounting="vertical", translation=(0.1, 0.0, 0.0), time_offset=0.05,
                    noise_sigma=noise_sigma, horizontal_res_deg=horizontal_res_deg),
    ]


def scenario_room(duration: float = 60.0, seed: int = 0, noiseless: bool = False,
                  horizontal_res_deg: float = 0.4) -> Scenario:
    """Room with four walls, floor, ceiling and pillars; figure-eight flight."""
    sigma = 0.0 if noiseless else 0.01
    return Scenario(
        "room",
        room_world(seed=seed),
        figure_eight(),
        default_lidars(sigma, horizontal_res_deg),
        duration,
        imu_noise=ImuNoiseSpec.noiseless() if noiseless else ImuNoiseSpec(),
        seed=seed,
    )


def scenario_degenerate(duration: float = 40.0, seed: int = 0, noiseless: bool = False,
                        horizontal_res_deg: float = 0.4) -> Scenario:
    """Facade-and-ground world with a vertical flight path.

    The horizontal lidar only ever sees vertical structure; the vertical
    lidar sees the ground below and the facade ahead.
    """
    sigma = 0.0 if noiseless else 0.01
    period = 20.0
    w = 2 * np.pi / period
    traj = TrajectorySpec(
        x=Component(0.0, 0.0, (0.8,), (w,), (0.0,)),
        y=Component(0.0, 0.0, (1.5,), (w,), (0.7,)),
        z=Component(9.0, 0.0, (2.5,), (w,), (0.0,)),
        roll=Component(0.0, 0.0, (0.03,), (2 * w,), (0.4,)),
        pitch=Component(0.0, 0.0, (0.03,), (w,), (0.9,)),
        yaw=Component(0.0, 0.0, (0.3,), (w,), (0.0,)),
        ramp=2.0,
    )
    return Scenario(
        "facade",
        facade_world(seed),
        traj,
        default_lidars(sigma, horizontal_res_deg),
        duration,
        imu_noise=ImuNoiseSpec.noiseless() if noiseless else ImuNoiseSpec(),
        seed=seed,
    )


SCENARIOS = {"room": scenario_room, "facade": scenario_degenerate}
