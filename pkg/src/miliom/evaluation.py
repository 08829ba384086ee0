"""Absolute trajectory error with time association and rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_mul, rotation_angle, rotmat_to_quat


class EvaluationError(ValueError):
    pass


@dataclass
class AteResult:
    rmse: float
    t: np.ndarray
    errors: np.ndarray
    rotation_errors: np.ndarray
    R: np.ndarray
    translation: np.ndarray

    @property
    def pairs(self) -> int:
        return len(self.t)

    @property
    def max_rotation(self) -> float:
        return float(np.max(self.rotation_errors)) if len(self.rotation_errors) else 0.0


def associate(t_est: np.ndarray, t_gt: np.ndarray, max_gap: float = 0.01):
    """Index pairs (est, gt) by nearest ground-truth timestamp within ``max_gap``."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    order = np.argsort(t_gt, kind="stable")
    ts = t_gt[order]
    pos = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(ts[left] - t_est) <= np.abs(ts[pos] - t_est), left, pos)
    gap = np.abs(ts[pick] - t_est)
    ok = gap <= max_gap + 1e-12
    return np.flatnonzero(ok), order[pick[ok]]


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """R, t minimizing sum ||R src + t - dst||^2 (closed form, no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def evaluate_ate(t_est, p_est, q_est, t_gt, p_gt, q_gt=None, max_gap: float = 0.01,
                 align: bool = True, min_pairs: int = 10) -> AteResult:
    ie, ig = associate(t_est, t_gt, max_gap)
    if len(ie) < min_pairs:
        raise EvaluationError(f"only {len(ie)} associated pairs (need {min_pairs})")
    pe = np.asarray(p_est, dtype=float)[ie]
    pg = np.asarray(p_gt, dtype=float)[ig]
    if align:
        R, t = align_rigid(pe, pg)
    else:
        R, t = np.eye(3), np.zeros(3)
    err = pe @ R.T + t - pg
    rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    if q_est is not None and q_gt is not None:
        q_aligned = quat_mul(rotmat_to_quat(R), np.asarray(q_est, dtype=float)[ie])
        rot = rotation_angle(q_aligned, np.asarray(q_gt, dtype=float)[ig])
    else:
        rot = np.zeros(0)
    return AteResult(rmse, np.asarray(t_est, dtype=float)[ie], err, np.atleast_1d(rot), R, t)
