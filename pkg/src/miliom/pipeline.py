"""Frame-by-frame odometry: frontend, matching, joint optimization, keyframes."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .estimator import (
    EstimationDivergence,
    SlidingWindow,
    build_problem,
    optimize,
    slide_window,
)
from .frontend import FeatureCloud, FrameSkipped, deskew, deskew_piecewise, extract_features, merge_scfc, transform_to_local
from .geometry import RigidTransform, gravity_aligned_quat
from .imu import ImuDataError, ImuStream, NavState, preintegrate, propagate, relative_transform
from .keyframes import KeyframeStore
from .matching import AssociationCache, FmmSet, LocalMap, fmm_parallel
from .sim import RawScan

log = logging.getLogger(__name__)


@dataclass
class FrameTiming:
    """Per-frame durations in seconds.

    ``extraction`` is the per-lidar feature extraction as scans arrive;
    ``frontend`` covers deskew, transform and matching before the solve;
    ``backend`` is the solver; ``loop`` runs from one solve start to the next.
    """

    t: float
    extraction: float
    frontend: float
    backend: float
    loop: float
    features: int
    factors: int


@dataclass
class RunResult:
    """High-rate predicted poses, refined per-frame states and diagnostics."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    frame_t: np.ndarray
    frame_p: np.ndarray
    frame_q: np.ndarray
    timings: list[FrameTiming]
    store: KeyframeStore
    skipped: list[tuple[float, str]] = field(default_factory=list)
    reports: list = field(default_factory=list)


def initial_state(imu: ImuStream, t0: float, window: float, gravity: float) -> NavState:
    """Level the body from the mean specific force near ``t0``; yaw, position, velocity zero."""
    sel = np.abs(imu.t - t0) <= window
    if not np.any(sel):
        sel = np.argsort(np.abs(imu.t - t0))[:1]
    q = gravity_aligned_quat(imu.accel[sel].mean(axis=0))
    return NavState(q=q, t=t0)


class Odometry:
    def __init__(self, imu: ImuStream, cfg: Config | None = None):
        self.cfg = cfg or Config()
        self.imu = imu
        self.gravity = np.array([0.0, 0.0, self.cfg.gravity])
        self.window = SlidingWindow(self.cfg.window_size)
        self.store = KeyframeStore(self.cfg.keyframe())
        self.bootstrap: list[list] = []  # [frame index, cfc, pose]
        self.noise = self.cfg.imu_noise()
        self.feature_cfg = self.cfg.feature()
        self.match_cfg = self.cfg.match()
        self.solver_cfg = self.cfg.solver()
        self.assoc_cache = AssociationCache(self.cfg.reuse_translation, self.cfg.reuse_rotation)
        self._map_key = None
        self._map = None

    # ------------------------------------------------------------ helpers

    def _extract(self, scans: list[RawScan], pool) -> list[FeatureCloud]:
        if pool is None:
            return [extract_features(s, self.feature_cfg) for s in scans]
        return list(pool.map(lambda s: extract_features(s, self.feature_cfg), scans))

    def _deskew(self, scfc: FeatureCloud, state: NavState) -> FeatureCloud:
        prop = propagate(state, self.imu.slice(state.t, scfc.t_end), self.gravity)
        if self.cfg.deskew_mode == "piecewise":
            base = RigidTransform(prop.q[0], prop.p[0]).inverse()
            poses = [base @ RigidTransform(q, p) for q, p in zip(prop.q, prop.p)]
            return deskew_piecewise(scfc, prop.t, poses)
        return deskew(scfc, relative_transform(prop, scfc.t_start, scfc.t_end))

    def _local_map(self, predicted_p: np.ndarray) -> LocalMap | None:
        M = self.cfg.window_size
        if len(self.store) >= M:
            kfs = self.store.knn_key_poses(predicted_p, M)
            boot = []
        else:
            kfs = list(self.store.keyframes)
            boot = self.bootstrap
        # rebuilding is skipped while the contributing clouds and poses are unchanged
        key = (tuple(kf.id for kf in kfs),
               tuple((e[0], e[2].q.tobytes(), e[2].t.tobytes()) for e in boot))
        if key != self._map_key:
            clouds = [transform_to_local(c, T) for _, c, T in boot] + [kf.local_cloud() for kf in kfs]
            self._map = LocalMap.from_clouds(clouds, self.match_cfg) if clouds else None
            self._map_key = key
        return self._map

    def _record_bootstrap(self, frame: int):
        M = self.cfg.window_size
        n = len(self.window)
        for entry in self.bootstrap:
            offset = frame - entry[0]
            if offset < n and self.cfg.bootstrap_update:
                entry[2] = self.window.states[n - 1 - offset].pose
        if len(self.bootstrap) < M - 1:
            self.bootstrap.append([frame, self.window.cfcs[-1], self.window.newest.pose])

    # ------------------------------------------------------------ main loop

    def run(self, scans: list[RawScan]) -> RunResult:
        cfg = self.cfg
        scans = sorted(scans, key=lambda s: (s.t_start, s.lidar_id))
        primary = [s for s in scans if s.lidar_id == cfg.primary_lidar]
        if not primary:
            raise ImuDataError(f"no scans from primary lidar {cfg.primary_lidar}")
        periods = np.diff([s.t_start for s in primary])
        nominal = float(np.median(periods)) if len(periods) else primary[0].t_end - primary[0].t_start

        out_t, out_p, out_q = [], [], []
        frame_t, frame_p, frame_q = [], [], []
        timings: list[FrameTiming] = []
        skipped: list[tuple[float, str]] = []
        reports = []
        last_opt_start = None
        cursor = 0
        pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        frame = 0
        try:
            for k, pscan in enumerate(primary):
                t_k = pscan.t_start
                t_next = primary[k + 1].t_start if k + 1 < len(primary) else t_k + nominal
                tic = time.perf_counter()
                while cursor < len(scans) and scans[cursor].t_start < t_k - 1e-6:
                    cursor += 1
                members = []
                j = cursor
                while j < len(scans) and scans[j].t_start < t_next - 1e-6:
                    members.append(scans[j])
                    j += 1
                try:
                    scfc = merge_scfc(self._extract(members, pool), t_k, t_next, cfg.primary_lidar)
                except FrameSkipped as exc:
                    skipped.append((t_k, str(exc)))
                    log.warning("frame at %.3f skipped: %s", t_k, exc)
                    continue
                if scfc.t_end > self.imu.t[-1] or (len(self.window) and t_next > self.imu.t[-1]):
                    skipped.append((t_k, "IMU data ends before the frame"))
                    break
                if t_k < self.imu.t[0]:
                    skipped.append((t_k, "frame precedes IMU data"))
                    continue
                extraction = time.perf_counter() - tic
                tic = time.perf_counter()

                if not len(self.window):
                    seed = initial_state(self.imu, t_k, cfg.init_window, cfg.gravity)
                    preint = None
                else:
                    prev = self.window.newest
                    preint = preintegrate(self.imu.slice(prev.t, t_k), prev.b_omega, prev.b_accel, self.noise)
                    prop = propagate(prev, self.imu.slice(prev.t, t_k), self.gravity)
                    seed = prop.state_at(t_k, prev)
                cfc = self._deskew(scfc, seed)
                slide_window(self.window, seed, cfc, preint)
                lmap = self._local_map(seed.p)
                frontend = time.perf_counter() - tic

                backend = 0.0
                factors = 0
                opt_start = time.perf_counter()
                for _ in range(cfg.outer_rounds if lmap is not None else 1):
                    t0 = time.perf_counter()
                    if lmap is not None:
                        poses = [s.pose for s in self.window.states]
                        fmms = fmm_parallel(self.window.cfcs, poses, lmap, self.match_cfg, cfg.threads,
                                            self.assoc_cache)
                    else:
                        fmms = [FmmSet.empty() for _ in self.window.states]
                    t1 = time.perf_counter()
                    problem = build_problem(self.window, fmms, self.solver_cfg, self.gravity)
                    states, report = optimize(problem, self.solver_cfg)
                    t2 = time.perf_counter()
                    frontend += t1 - t0
                    backend += t2 - t1
                    factors = problem.lidar_factor_count
                    reports.append(report)
                    if not all(s.is_finite() for s in states):
                        raise EstimationDivergence(f"non-finite state at t={t_k:.6f}")
                    self.window.states = states
                loop = opt_start - last_opt_start if last_opt_start is not None else float("nan")
                last_opt_start = opt_start
                timings.append(FrameTiming(t_k, extraction, frontend, backend, loop, len(cfc), factors))

                self._record_bootstrap(frame)
                if self.window.full:
                    v = self.window.middle_index
                    sv = self.window.states[v]
                    self.store.consider_admit(sv.q, sv.p, self.window.cfcs[v])

                latest = self.window.newest
                frame_t.append(latest.t)
                frame_p.append(latest.p.copy())
                frame_q.append(latest.q.copy())
                t_out = self.imu.t[(self.imu.t >= t_k - 1e-12) & (self.imu.t < t_next - 1e-9)]
                if len(t_out) and t_out[-1] > t_k:
                    prop = propagate(latest, self.imu.slice(t_k, float(t_out[-1])), self.gravity)
                    for t in t_out:
                        q, p, _ = prop.pose_at(float(t))
                        out_t.append(float(t))
                        out_p.append(p)
                        out_q.append(q)
                elif len(t_out):
                    out_t.append(float(t_out[0]))
                    out_p.append(latest.p.copy())
                    out_q.append(latest.q.copy())
                frame += 1
        finally:
            if pool is not None:
                pool.shutdown()

        return RunResult(
            np.asarray(out_t), np.asarray(out_p).reshape(-1, 3), np.asarray(out_q).reshape(-1, 4),
            np.asarray(frame_t), np.asarray(frame_p).reshape(-1, 3), np.asarray(frame_q).reshape(-1, 4),
            timings, self.store, skipped, reports,
        )


def run_pipeline(scans: list[RawScan], imu: ImuStream, cfg: Config | None = None) -> RunResult:
    return Odometry(imu, cfg).run(scans)
