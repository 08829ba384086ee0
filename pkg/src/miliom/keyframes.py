"""Key pose admission, nearest-key-pose queries and global map export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .frontend import FeatureCloud, transform_to_local
from .geometry import RigidTransform, rotation_angle
from .matching import voxel_downsample


@dataclass
class Keyframe:
    id: int
    q: np.ndarray
    p: np.ndarray
    cfc: FeatureCloud

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.q, self.p)

    def local_cloud(self) -> FeatureCloud:
        return transform_to_local(self.cfc, self.pose)


@dataclass
class KeyframeConfig:
    knn: int = 10
    distance: float = 1.0
    angle: float = np.pi / 18
    cap: int | None = None


class KeyframeStore:
    """Admitted key poses with their body-frame feature clouds."""

    def __init__(self, cfg: KeyframeConfig | None = None):
        self.cfg = cfg or KeyframeConfig()
        self.keyframes: list[Keyframe] = []
        self._next_id = 0
        self._tree = None

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def positions(self) -> np.ndarray:
        return np.array([kf.p for kf in self.keyframes]).reshape(-1, 3)

    def _index(self):
        if self._tree is None and self.keyframes:
            self._tree = cKDTree(self.positions)
        return self._tree

    def knn_key_poses(self, p: np.ndarray, K: int) -> list[Keyframe]:
        """The K key poses nearest to ``p`` by position, nearest first.

        Equidistant key poses are ordered newest first, so a store of poses
        sharing one position (rotation in place) compares against the most
        recent admissions.
        """
        K = min(int(K), len(self))
        if K <= 0:
            return []
        p = np.asarray(p, dtype=float)
        tree = self._index()
        dist, _ = tree.query(p, k=K)
        radius = float(np.max(dist))
        idx = np.asarray(tree.query_ball_point(p, radius + 1e-9 * max(radius, 1.0)), dtype=int)
        d = np.linalg.norm(self.positions[idx] - p, axis=1)
        order = np.lexsort((-idx, np.round(d, 9)))
        return [self.keyframes[i] for i in idx[order[:K]]]

    def should_admit(self, q: np.ndarray, p: np.ndarray) -> bool:
        neighbors = self.knn_key_poses(p, self.cfg.knn)
        if not neighbors:
            return True
        Np = np.array([kf.p for kf in neighbors])
        Nq = np.array([kf.q for kf in neighbors])
        far = np.all(np.linalg.norm(Np - p, axis=1) > self.cfg.distance)
        turned = np.all(rotation_angle(q, Nq) > self.cfg.angle)
        return bool(far or turned)

    def consider_admit(self, q: np.ndarray, p: np.ndarray, cfc: FeatureCloud) -> Keyframe | None:
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("key pose must be finite")
        if not self.should_admit(q, p):
            return None
        kf = Keyframe(self._next_id, q.copy(), p.copy(), cfc)
        self._next_id += 1
        self.keyframes.append(kf)
        if self.cfg.cap is not None and len(self) > self.cfg.cap:
            far = int(np.argmax(np.linalg.norm(self.positions - p, axis=1)))
            del self.keyframes[far]
        self._tree = None
        return kf


def export_global_map(store: KeyframeStore, leaf: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All key clouds in the local frame as (xyz, kind); optionally voxel-thinned per kind."""
    if not len(store):
        return np.zeros((0, 3)), np.zeros(0, np.int8)
    clouds = [kf.local_cloud() for kf in store.keyframes]
    xyz = np.vstack([c.xyz for c in clouds])
    kind = np.concatenate([c.kind for c in clouds])
    if leaf:
        parts = [(voxel_downsample(xyz[kind == k], leaf), k) for k in np.unique(kind)]
        xyz = np.vstack([a for a, _ in parts])
        kind = np.concatenate([np.full(len(a), k, np.int8) for a, k in parts])
    return xyz, kind
