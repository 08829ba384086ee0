"""Per-ring feature extraction, multi-lidar merging and motion deskew."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, exp_rotvec, log_quat, quat_conj, quat_mul, quat_to_rotmat
from .sim import RawScan

log = logging.getLogger(__name__)

EDGE = 0
PLANE = 1

SKEWED = "skewed"
BODY = "body"
LOCAL = "local"


@dataclass
class FeatureConfig:
    half_window: int = 5
    edge_threshold: float = 0.5
    plane_threshold: float = 0.05
    sectors: int = 6
    edge_cap: int = 2
    plane_cap: int = 12
    reject_unreliable: bool = True
    gap_factor: float = 1.5
    jump_ratio: float = 0.1
    parallel_factor: float = 10.0


@dataclass
class FeatureCloud:
    """Feature points with per-point time offset from ``t_start``.

    ``frame`` is ``skewed`` for raw-sensor coordinates gathered over the
    sweep, ``body`` once deskewed to the body frame at ``t_start``, and
    ``local`` after transformation into the local frame.
    """

    t_start: float
    t_end: float
    xyz: np.ndarray
    dt: np.ndarray
    kind: np.ndarray
    source: np.ndarray
    frame: str = SKEWED
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.dt = np.asarray(self.dt, dtype=float)
        self.kind = np.asarray(self.kind, dtype=np.int8)
        self.source = np.asarray(self.source, dtype=np.int16)

    def __len__(self) -> int:
        return len(self.dt)

    @property
    def edges(self) -> np.ndarray:
        return self.xyz[self.kind == EDGE]

    @property
    def planes(self) -> np.ndarray:
        return self.xyz[self.kind == PLANE]

    @classmethod
    def empty(cls, t_start=0.0, t_end=0.0, frame=SKEWED) -> "FeatureCloud":
        return cls(t_start, t_end, np.zeros((0, 3)), [], [], [], frame)


class FrameSkipped(Exception):
    pass


def _segments(dt: np.ndarray, rng: np.ndarray, cfg: FeatureConfig, ring: np.ndarray | None = None) -> np.ndarray:
    """Segment id per point; a new segment starts at time gaps, range jumps and ring changes.

    Points must be ordered by ring, then time.
    """
    n = len(dt)
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    step = np.diff(dt)
    new_ring = np.zeros(n - 1, bool) if ring is None else ring[1:] != ring[:-1]
    within = step[~new_ring]
    nominal = np.median(within) if len(within) else 0.0
    brk = new_ring | (step > cfg.gap_factor * max(nominal, 1e-12))
    if cfg.reject_unreliable:
        jump = np.abs(np.diff(rng)) > cfg.jump_ratio * np.minimum(rng[1:], rng[:-1])
        brk |= jump
    return np.concatenate([[0], np.cumsum(brk)])


def smoothness(xyz: np.ndarray, seg: np.ndarray, half: int) -> tuple[np.ndarray, np.ndarray]:
    """Curvature score per point and whether its full window lies in one segment.

    The score is ||sum_j (x_j - x_i)|| / sum_j ||x_j - x_i|| over the
    symmetric window: 0 on straight runs, about 0.7 at a right-angle corner.
    """
    n = len(xyz)
    c = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    if n < 2 * half + 1:
        return c, valid
    idx = np.arange(half, n - half)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(xyz, axis=0)])
    total = csum[idx + half + 1] - csum[idx - half] - (2 * half + 1) * xyz[idx]
    dist = np.zeros(len(idx))
    centre = xyz[half:n - half]
    for k in range(-half, half + 1):
        if k:
            d = xyz[half + k:n - half + k] - centre
            dist += np.sqrt(np.einsum("ij,ij->i", d, d))
    # segment ids never decrease along the ring
    same = seg[idx - half] == seg[idx + half]
    c[idx] = np.sqrt(np.einsum("ij,ij->i", total, total)) / np.maximum(dist, 1e-12)
    valid[idx] = same & (dist > 0)
    return c, valid


def _pick_all(cand, group, cap, blocked, seg, half):
    """Greedy selection of candidates in the given order, at most ``cap[g]`` per group.

    Each group's candidates are contiguous; a pick blocks its window within
    the same segment.
    """
    if len(cand) == 0:
        return np.zeros(0, dtype=np.int64)
    n = len(blocked)
    # block range of each point clipped to its own segment
    idx = np.arange(n)
    first = np.r_[0, np.flatnonzero(seg[1:] != seg[:-1]) + 1]
    seg_lo = np.repeat(first, np.diff(np.r_[first, n]))
    seg_hi = np.repeat(np.r_[first[1:], n], np.diff(np.r_[first, n]))
    lo = np.maximum(idx - half, seg_lo).tolist()
    hi = np.minimum(idx + half + 1, seg_hi).tolist()
    blocked = blocked.tolist()
    cand_l = cand.tolist()
    cap_l = np.asarray(cap).tolist()
    bounds = np.flatnonzero(np.r_[True, group[1:] != group[:-1], True]).tolist()
    groups = group.tolist()
    picked = []
    for start, end in zip(bounds[:-1], bounds[1:]):
        limit = cap_l[groups[start]]
        count = 0
        for k in range(start, end):
            if count >= limit:
                break
            i = cand_l[k]
            if blocked[i]:
                continue
            picked.append(k)
            count += 1
            a, b = lo[i], hi[i]
            blocked[a:b] = [True] * (b - a)
    return np.asarray(picked, dtype=np.int64)


def extract_features(scan: RawScan, cfg: FeatureConfig | None = None) -> FeatureCloud:
    """Edge and plane features chosen ring by ring from the smoothness score."""
    cfg = cfg or FeatureConfig()
    period = max(scan.t_end - scan.t_start, 1e-9)
    h = cfg.half_window
    members = np.lexsort((scan.dt, scan.ring))
    ring = scan.ring[members]
    xyz = scan.xyz[members]
    dt = scan.dt[members]
    rings, ring_count = np.unique(ring, return_counts=True)
    short = ring_count < 2 * h + 1
    skipped = int(np.count_nonzero(short))

    rng = np.sqrt(np.einsum("ij,ij->i", xyz, xyz))
    seg = _segments(dt, rng, cfg, ring)
    c, valid = smoothness(xyz, seg, h)
    valid &= ~np.repeat(short, ring_count)
    if cfg.reject_unreliable and len(xyz) > 2:
        # beams grazing a surface: both neighbours much farther than the angular step
        same_ring = ring[1:] == ring[:-1]
        steps = np.diff(dt)[same_ring]
        step = (np.median(steps) if len(steps) else 0.0) / period * 2 * np.pi
        gap = np.sqrt(np.sum(np.diff(xyz, axis=0) ** 2, axis=1))
        expected = cfg.parallel_factor * rng * step
        grazing = np.zeros(len(xyz), dtype=bool)
        grazing[1:-1] = (gap[:-1] > expected[1:-1]) & (gap[1:] > expected[1:-1])
        # ring ends have a single neighbour and are never marked grazing
        grazing[1:-1] &= same_ring[:-1] & same_ring[1:]
        valid &= ~grazing

    # candidates grouped by ring, sector and kind; a sector's edges go before its planes
    sector = np.minimum((dt / period * cfg.sectors).astype(int), cfg.sectors - 1)
    ring_rank = np.repeat(np.arange(len(rings)), ring_count)
    edge_c = np.flatnonzero(valid & (c > cfg.edge_threshold))
    plane_c = np.flatnonzero(valid & (c < cfg.plane_threshold))
    cand = np.concatenate([edge_c, plane_c])
    is_plane = np.r_[np.zeros(len(edge_c), np.int64), np.ones(len(plane_c), np.int64)]
    key = np.where(is_plane == 1, c[cand], -c[cand])
    group = (ring_rank[cand] * cfg.sectors + sector[cand]) * 2 + is_plane
    order = np.lexsort((cand, key, group))
    cand, group, is_plane = cand[order], group[order], is_plane[order]
    cap = np.where(np.arange(2 * len(rings) * cfg.sectors) % 2 == 1, cfg.plane_cap, cfg.edge_cap)
    picked = _pick_all(cand, group, cap, ~valid, seg, h)

    sel_idx = members[cand[picked]]
    kind = np.where(is_plane[picked] == 1, PLANE, EDGE).astype(np.int8)
    order = np.argsort(scan.dt[sel_idx], kind="stable")
    sel_idx = sel_idx[order]
    kind = kind[order]
    return FeatureCloud(
        scan.t_start,
        scan.t_end,
        scan.xyz[sel_idx],
        scan.dt[sel_idx],
        kind,
        np.full(len(sel_idx), scan.lidar_id),
        SKEWED,
        {"rings_skipped": skipped},
    )


def merge_scfc(clouds: list[FeatureCloud], t_start: float, t_next: float, primary_id: int = 1,
               tol: float = 1e-6) -> FeatureCloud:
    """Union of clouds whose start time lies in ``[t_start, t_next)``.

    ``t_start`` must be the start of a primary-lidar cloud; point offsets
    are rebased to it.
    """
    members = [c for c in clouds if t_start - tol <= c.t_start < t_next - tol]
    if not any(abs(c.t_start - t_start) <= tol and np.all(c.source == primary_id) for c in members):
        raise FrameSkipped(f"no primary cloud starting at {t_start:.6f}")
    if not members:
        raise FrameSkipped("no clouds in window")
    members.sort(key=lambda c: (c.t_start, int(c.source[0]) if len(c) else 0))
    return FeatureCloud(
        t_start,
        max(c.t_end for c in members),
        np.vstack([c.xyz for c in members]),
        np.concatenate([c.dt + (c.t_start - t_start) for c in members]),
        np.concatenate([c.kind for c in members]),
        np.concatenate([c.source for c in members]),
        SKEWED,
        {"members": len(members)},
    )


def deskew(scfc: FeatureCloud, rel: RigidTransform) -> FeatureCloud:
    """Re-express points in the body frame at ``t_start``.

    ``rel`` is the body pose at ``t_end`` relative to the body at
    ``t_start``; a point captured at fraction s of the span is moved by
    slerp(identity, rel.q, s) and s * rel.t.
    """
    if scfc.frame != SKEWED:
        raise ValueError(f"deskew expects a skewed cloud, got {scfc.frame!r}")
    span = scfc.t_end - scfc.t_start
    s = scfc.dt / span if span > 0 else np.zeros(len(scfc))
    clamped = int(np.count_nonzero((s < 0) | (s > 1)))
    if clamped:
        log.warning("deskew: %d point times outside the cloud span were clamped", clamped)
    s = np.clip(s, 0.0, 1.0)
    if rel.q[0] == 1.0 and not np.any(rel.t):
        xyz = scfc.xyz.copy()
    else:
        R = quat_to_rotmat(exp_rotvec(s[:, None] * log_quat(rel.q)))
        xyz = np.einsum("nij,nj->ni", R, scfc.xyz) + s[:, None] * rel.t
    return FeatureCloud(
        scfc.t_start, scfc.t_end, xyz, scfc.dt.copy(), scfc.kind.copy(), scfc.source.copy(),
        BODY, dict(scfc.diagnostics, clamped=clamped),
    )


def deskew_piecewise(scfc: FeatureCloud, knot_times: np.ndarray, knot_poses: list[RigidTransform]) -> FeatureCloud:
    """Deskew with the same interpolation applied between consecutive pose knots.

    ``knot_poses`` are body poses relative to the body at ``t_start`` at the
    absolute ``knot_times`` (e.g. every IMU sample of a propagation).
    """
    if scfc.frame != SKEWED:
        raise ValueError(f"deskew expects a skewed cloud, got {scfc.frame!r}")
    t = scfc.t_start + scfc.dt
    t = np.clip(t, knot_times[0], knot_times[-1])
    seg = np.clip(np.searchsorted(knot_times, t, side="right") - 1, 0, len(knot_times) - 2)
    Q = np.array([T.q for T in knot_poses])
    P = np.array([T.t for T in knot_poses])
    Ra = quat_to_rotmat(Q[:-1])
    step_q = quat_mul(quat_conj(Q[:-1]), Q[1:])
    step_t = np.einsum("kji,kj->ki", Ra, P[1:] - P[:-1])
    s = (t - knot_times[seg]) / (knot_times[seg + 1] - knot_times[seg])
    R = quat_to_rotmat(exp_rotvec(s[:, None] * log_quat(step_q)[seg]))
    local = np.einsum("nij,nj->ni", R, scfc.xyz) + s[:, None] * step_t[seg]
    xyz = np.einsum("nij,nj->ni", Ra[seg], local) + P[seg]
    return FeatureCloud(
        scfc.t_start, scfc.t_end, xyz, scfc.dt.copy(), scfc.kind.copy(), scfc.source.copy(),
        BODY, dict(scfc.diagnostics),
    )


def transform_to_local(cfc: FeatureCloud, pose: RigidTransform) -> FeatureCloud:
    if cfc.frame != BODY:
        raise ValueError(f"transform_to_local expects a body-frame cloud, got {cfc.frame!r}")
    return FeatureCloud(
        cfc.t_start, cfc.t_end, pose.apply(cfc.xyz), cfc.dt.copy(), cfc.kind.copy(),
        cfc.source.copy(), LOCAL, dict(cfc.diagnostics),
    )
