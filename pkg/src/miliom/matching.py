"""Local map assembly and feature-to-map matching coefficients."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .frontend import BODY, EDGE, LOCAL, PLANE, FeatureCloud
from .geometry import RigidTransform, quat_conj, quat_mul, quat_to_rotmat, sym3_eigvalsh, sym3_solve


class FitFailed(ValueError):
    pass


class NoMapError(RuntimeError):
    pass


@dataclass
class MatchConfig:
    knn: int = 5
    max_radius: float = 2.0
    min_fitness: float = 0.1
    edge_dominance: float = 3.0
    plane_max_deviation: float = 0.05
    plane_min_spread: float = 0.05
    plane_leaf: float = 0.4
    edge_leaf: float = 0.2
    rank_tol: float = 1e-10


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Keep, per occupied voxel, the input point nearest the voxel centroid.

    Output is ordered by voxel key so it is independent of input order.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0 or leaf <= 0:
        return points.copy()
    keys = np.floor(points / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    centroid = np.stack([np.bincount(inverse, points[:, i]) for i in range(3)], axis=1) / counts[:, None]
    dist = np.linalg.norm(points - centroid[inverse], axis=1)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], dist, inverse))
    first = np.r_[True, inverse[order][1:] != inverse[order][:-1]]
    return points[order[first]]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float).reshape(-1, 3)
    a.setflags(write=False)
    return a


class LocalMap:
    """Plane and edge point clouds in the local frame with KNN indexes.

    Read-only after construction so that it can be shared across matching
    threads.
    """

    def __init__(self, plane: np.ndarray, edge: np.ndarray):
        self.plane = _readonly(plane)
        self.edge = _readonly(edge)
        self.plane_tree = cKDTree(self.plane) if len(self.plane) else None
        self.edge_tree = cKDTree(self.edge) if len(self.edge) else None

    def __len__(self) -> int:
        return len(self.plane) + len(self.edge)

    @classmethod
    def from_clouds(cls, clouds: list[FeatureCloud], cfg: MatchConfig | None = None) -> "LocalMap":
        cfg = cfg or MatchConfig()
        if any(c.frame != LOCAL for c in clouds):
            raise ValueError("map clouds must be in the local frame")
        xyz = np.vstack([c.xyz for c in clouds]) if clouds else np.zeros((0, 3))
        kind = np.concatenate([c.kind for c in clouds]) if clouds else np.zeros(0)
        return cls(
            voxel_downsample(xyz[kind == PLANE], cfg.plane_leaf),
            voxel_downsample(xyz[kind == EDGE], cfg.edge_leaf),
        )


def assemble_local_map(store, predicted_p: np.ndarray, M: int, cfg: MatchConfig | None = None,
                       bootstrap: list[FeatureCloud] | None = None) -> LocalMap:
    """Map from the M keyframes nearest ``predicted_p``, or the bootstrap clouds.

    ``bootstrap`` holds local-frame clouds of the first frames and is used
    while the store has fewer than M keyframes.
    """
    cfg = cfg or MatchConfig()
    if store is not None and len(store) >= M:
        clouds = [kf.local_cloud() for kf in store.knn_key_poses(predicted_p, M)]
    elif bootstrap:
        clouds = list(bootstrap)
    elif store is not None and len(store):
        clouds = [kf.local_cloud() for kf in store.keyframes]
    else:
        raise NoMapError("no keyframes and no bootstrap clouds")
    return LocalMap.from_clouds(clouds, cfg)


# ---------------------------------------------------------------- model fits


def _plane_fit_batch(X: np.ndarray, rank_tol: float):
    """Least-squares X n = -1 per batch entry; returns (n, ok)."""
    A = np.einsum("bki,bkj->bij", X, X)
    b = -X.sum(axis=1)
    eig = sym3_eigvalsh(A)
    ok = eig[:, 0] > rank_tol * np.maximum(eig[:, -1], 1e-300)
    n = np.zeros_like(b)
    if np.any(ok):
        n[ok] = sym3_solve(A[ok], b[ok])
    return n, ok


def _spread_ok(X: np.ndarray, ratio: float) -> np.ndarray:
    """Neighbors span two directions even with any single point left out.

    Points along one scan ring plus a stray point from another surface fit a
    tilted plane exactly; dropping the stray point exposes the line.
    """
    k = X.shape[1]
    d = X - X.mean(axis=1, keepdims=True)
    S = np.einsum("bki,bkj->bij", d, d)
    ok = np.ones(len(X), bool)
    for drop in range(k):
        # scatter of the remaining k-1 points about their own mean
        x = d[:, drop]
        cov = S - (k / (k - 1)) * x[:, :, None] * x[:, None, :]
        eig = sym3_eigvalsh(cov)
        ok &= eig[:, 1] >= ratio * eig[:, 2]
    return ok


def fit_plane_hesse(neighbors: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Unnormalized Hesse vector n with n.x + 1 = 0 on the plane."""
    X = np.asarray(neighbors, dtype=float).reshape(1, -1, 3)
    if X.shape[1] < 3:
        raise FitFailed("need at least three points")
    n, ok = _plane_fit_batch(X, rank_tol)
    if not ok[0]:
        raise FitFailed("rank-deficient plane fit")
    return n[0]


def _line_fit_batch(X: np.ndarray):
    centroid = X.mean(axis=1)
    d = X - centroid[:, None, :]
    A = np.einsum("bki,bkj->bij", d, d) / X.shape[1]
    eig, vec = np.linalg.eigh(A)
    return centroid, vec[:, :, 2], eig


def fit_edge_line(neighbors: np.ndarray, dominance: float = 3.0):
    """Centroid and unit principal direction; rejects clusters that are not line-like."""
    X = np.asarray(neighbors, dtype=float).reshape(1, -1, 3)
    if X.shape[1] == 0:
        raise FitFailed("no points")
    centroid, v, eig = _line_fit_batch(X)
    if eig[0, 2] < dominance * eig[0, 1] or eig[0, 2] <= 0:
        raise FitFailed("neighbors are not line-like")
    return centroid[0], v[0]


def edge_planes(x0: np.ndarray, centroid: np.ndarray, direction: np.ndarray):
    """Two orthogonal planes through the fitted line, batched.

    Returns n1 (unit), n2 = v12 x n1, c1, c2 and the point-to-line fitness
    ratio ||v01 x v02|| / ||v12||.
    """
    x1 = centroid + 0.1 * direction
    x2 = centroid - 0.1 * direction
    v01, v02, v12 = x0 - x1, x0 - x2, x1 - x2
    area = np.cross(-v01, v02)
    n1 = np.cross(v12, area)
    norm = np.linalg.norm(n1, axis=-1, keepdims=True)
    on_line = norm[..., 0] <= 1e-12 * np.maximum(np.linalg.norm(v12, axis=-1) ** 3, 1e-300)
    if np.any(on_line):
        # point on the line: any unit normal to the line will do
        helper = np.where(np.abs(direction[..., :1]) < 0.9, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        alt = np.cross(direction, helper)
        n1 = np.where(on_line[..., None], alt, n1)
        norm = np.linalg.norm(n1, axis=-1, keepdims=True)
    n1 = n1 / norm
    n2 = np.cross(v12, n1)
    foot = x0 - n1 * np.sum(n1 * v01, axis=-1, keepdims=True)
    c1 = -np.sum(n1 * foot, axis=-1)
    c2 = -np.sum(n2 * foot, axis=-1)
    ratio = np.linalg.norm(np.cross(v01, v02), axis=-1) / np.linalg.norm(v12, axis=-1)
    return n1, n2, c1, c2, ratio


# ---------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class FmmCoeff:
    f: np.ndarray
    n: np.ndarray
    c: float
    kind: int


@dataclass
class FmmSet:
    """Matching tuples for one cloud: body-frame point, weighted normal, weighted offset."""

    f: np.ndarray
    n: np.ndarray
    c: np.ndarray
    kind: np.ndarray
    feature: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.c)

    def __getitem__(self, i) -> FmmCoeff:
        return FmmCoeff(self.f[i], self.n[i], float(self.c[i]), int(self.kind[i]))

    def subset(self, mask) -> "FmmSet":
        return FmmSet(self.f[mask], self.n[mask], self.c[mask], self.kind[mask], self.feature[mask],
                      dict(self.diagnostics))

    @classmethod
    def concat(cls, sets: list["FmmSet"]) -> "FmmSet":
        if not sets:
            return cls.empty()
        return cls(
            np.vstack([s.f for s in sets]), np.vstack([s.n for s in sets]),
            np.concatenate([s.c for s in sets]), np.concatenate([s.kind for s in sets]),
            np.concatenate([s.feature for s in sets]),
        )

    @classmethod
    def empty(cls) -> "FmmSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64))


def _neighbors(tree, cloud, queries, k, radius):
    if tree is None or len(cloud) < k or len(queries) == 0:
        return np.zeros(len(queries), bool), np.zeros((len(queries), k, 3))
    d, idx = tree.query(queries, k=k, distance_upper_bound=radius)
    d = d.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    ok = np.isfinite(d[:, -1])
    X = np.zeros((len(queries), k, 3))
    X[ok] = cloud[idx[ok]]
    return ok, X


@dataclass
class Association:
    """Neighborhood fits of one cloud against one map, reusable for small pose changes."""

    pose: RigidTransform
    pidx: np.ndarray
    nbar: np.ndarray
    plane_ok: np.ndarray
    eidx: np.ndarray
    centroid: np.ndarray
    direction: np.ndarray
    edge_ok: np.ndarray
    diagnostics: dict


def associate(cfc: FeatureCloud, pose: RigidTransform, lmap: LocalMap, cfg: MatchConfig | None = None) -> Association:
    """KNN search and model fits for every feature of a body-frame cloud."""
    cfg = cfg or MatchConfig()
    if cfc.frame != BODY:
        raise ValueError(f"expected a body-frame cloud, got {cfc.frame!r}")
    f_local = pose.apply(cfc.xyz) if len(cfc.xyz) else cfc.xyz
    diag = {}

    pidx = np.flatnonzero(cfc.kind == PLANE)
    ok, X = _neighbors(lmap.plane_tree, lmap.plane, f_local[pidx], cfg.knn, cfg.max_radius)
    diag["plane_total"] = len(pidx)
    diag["plane_no_neighbors"] = int(np.count_nonzero(~ok))
    nbar = np.zeros((len(pidx), 3))
    fit_ok = np.zeros(len(pidx), bool)
    if np.any(ok):
        nbar[ok], fit_ok[ok] = _plane_fit_batch(X[ok], cfg.rank_tol)
        nn = np.linalg.norm(nbar, axis=1)
        dev = np.abs(np.einsum("bkj,bj->bk", X, nbar) + 1.0) / np.maximum(nn, 1e-300)[:, None]
        fit_ok &= ok & (dev.max(axis=1) <= cfg.plane_max_deviation)
        if cfg.plane_min_spread > 0 and np.any(fit_ok):
            fit_ok[fit_ok] = _spread_ok(X[fit_ok], cfg.plane_min_spread)
    diag["plane_fit_failed"] = int(np.count_nonzero(ok & ~fit_ok))

    eidx = np.flatnonzero(cfc.kind == EDGE)
    ok, X = _neighbors(lmap.edge_tree, lmap.edge, f_local[eidx], cfg.knn, cfg.max_radius)
    diag["edge_total"] = len(eidx)
    diag["edge_no_neighbors"] = int(np.count_nonzero(~ok))
    centroid = np.zeros((len(eidx), 3))
    direction = np.zeros((len(eidx), 3))
    edge_ok = ok.copy()
    if np.any(ok):
        centroid[ok], direction[ok], eig = _line_fit_batch(X[ok])
        edge_ok[ok] = (eig[:, 2] >= cfg.edge_dominance * eig[:, 1]) & (eig[:, 2] > 0)
    diag["edge_fit_failed"] = int(np.count_nonzero(ok & ~edge_ok))
    return Association(pose, pidx, nbar, fit_ok, eidx, centroid, direction, edge_ok, diag)


def coefficients(cfc: FeatureCloud, pose: RigidTransform, assoc: Association,
                 cfg: MatchConfig | None = None) -> FmmSet:
    """Weighted matching tuples from fitted neighborhoods and the current pose."""
    return coefficients_batch([cfc], [pose], [assoc], cfg)[0]


def coefficients_batch(cfcs: list[FeatureCloud], poses: list[RigidTransform], assocs: list[Association],
                       cfg: MatchConfig | None = None) -> list[FmmSet]:
    """``coefficients`` for several clouds in one vectorized pass."""
    cfg = cfg or MatchConfig()
    M = len(cfcs)
    R = np.array([quat_to_rotmat(T.q) for T in poses]).reshape(M, 3, 3)
    t = np.array([T.t for T in poses]).reshape(M, 3)

    # plane tuples
    rows = [a.pidx[a.plane_ok] for a in assocs]
    owner = np.repeat(np.arange(M), [len(r) for r in rows])
    fb = np.concatenate([c.xyz[r] for c, r in zip(cfcs, rows)]).reshape(-1, 3)
    nbar = np.concatenate([a.nbar[a.plane_ok] for a in assocs]).reshape(-1, 3)
    fl = np.einsum("nij,nj->ni", R[owner], fb) + t[owner]
    nn = np.sqrt(np.einsum("ij,ij->i", nbar, nbar))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 1.0 - 0.9 * np.abs(np.einsum("ij,ij->i", nbar, fl) + 1.0) / (nn * np.sqrt(np.einsum("ij,ij->i", fl, fl)))
    keep = s > cfg.min_fitness
    g = s / nn
    p_rows = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
    p_low = np.bincount(owner[~keep], minlength=M)

    # edge tuples
    erows = [a.eidx[a.edge_ok] for a in assocs]
    eowner = np.repeat(np.arange(M), [len(r) for r in erows])
    efb = np.concatenate([c.xyz[r] for c, r in zip(cfcs, erows)]).reshape(-1, 3)
    efl = np.einsum("nij,nj->ni", R[eowner], efb) + t[eowner]
    centroid = np.concatenate([a.centroid[a.edge_ok] for a in assocs]).reshape(-1, 3)
    direction = np.concatenate([a.direction[a.edge_ok] for a in assocs]).reshape(-1, 3)
    if len(efl):
        n1, n2, c1, c2, ratio = edge_planes(efl, centroid, direction)
        es = 1.0 - 0.9 * ratio
    else:
        n1 = n2 = np.zeros((0, 3))
        c1 = c2 = es = np.zeros(0)
    ekeep = es > cfg.min_fitness
    eg = es / 2.0
    e_rows = np.concatenate(erows).astype(np.int64) if erows else np.zeros(0, np.int64)
    e_low = np.bincount(eowner[~ekeep], minlength=M)

    out = []
    for m in range(M):
        sel = np.flatnonzero((owner == m) & keep)
        esel = np.flatnonzero((eowner == m) & ekeep)
        gp, ge = g[sel], eg[esel]
        fmm = FmmSet(
            np.vstack([fb[sel], np.repeat(efb[esel], 2, axis=0)]),
            np.vstack([gp[:, None] * nbar[sel],
                       np.stack([ge[:, None] * n1[esel], ge[:, None] * n2[esel]], axis=1).reshape(-1, 3)]),
            np.concatenate([gp, np.stack([ge * c1[esel], ge * c2[esel]], axis=1).ravel()]),
            np.concatenate([np.full(len(sel), PLANE, np.int8), np.full(2 * len(esel), EDGE, np.int8)]),
            np.concatenate([p_rows[sel], np.repeat(e_rows[esel], 2)]),
        )
        fmm.diagnostics = dict(assocs[m].diagnostics, plane_low_fitness=int(p_low[m]),
                               edge_low_fitness=int(e_low[m]))
        out.append(fmm)
    return out


def fmm_coefficients(cfc: FeatureCloud, pose: RigidTransform, lmap: LocalMap,
                     cfg: MatchConfig | None = None) -> FmmSet:
    """Matching coefficients for a body-frame cloud placed at ``pose`` in the map.

    Plane features yield one tuple each, edge features two, when the
    neighborhood passes the radius and model gates and fitness exceeds the
    threshold.  The map is never modified.
    """
    return coefficients(cfc, pose, associate(cfc, pose, lmap, cfg), cfg)


class AssociationCache:
    """Keeps the last association of each cloud while its map and pose barely change.

    Neighbor sets are piecewise constant in the pose, so re-querying after a
    sub-centimeter move almost always returns the same points.  Entries are
    dropped when the map object changes.
    """

    def __init__(self, max_translation: float, max_rotation: float):
        self.max_translation = max_translation
        self.max_rotation = max_rotation
        self._map = None
        self._entries: dict[int, tuple[FeatureCloud, Association]] = {}

    def lookup(self, cfc: FeatureCloud, pose: RigidTransform, lmap: LocalMap) -> Association | None:
        if lmap is not self._map:
            self._map = lmap
            self._entries = {}
        hit = self._entries.get(id(cfc))
        if hit is None or hit[0] is not cfc:
            return None
        old = hit[1].pose
        dq = quat_mul(quat_conj(old.q), pose.q)
        angle = 2.0 * np.arctan2(np.linalg.norm(dq[1:]), abs(dq[0]))
        if np.linalg.norm(pose.t - old.t) <= self.max_translation and angle <= self.max_rotation:
            return hit[1]
        return None

    def store(self, cfc: FeatureCloud, assoc: Association):
        self._entries[id(cfc)] = (cfc, assoc)

    def retain(self, cfcs: list[FeatureCloud]):
        keep = {id(c) for c in cfcs}
        self._entries = {k: v for k, v in self._entries.items() if k in keep}


def fmm_parallel(cfcs: list[FeatureCloud], poses: list[RigidTransform], lmap: LocalMap,
                 cfg: MatchConfig | None = None, threads: int = 1,
                 cache: AssociationCache | None = None) -> list[FmmSet]:
    """Neighborhood search per cloud, optionally threaded; results are in input order."""
    cfg = cfg or MatchConfig()
    if cache is not None:
        assocs = [cache.lookup(c, T, lmap) for c, T in zip(cfcs, poses)]
    else:
        assocs = [None] * len(cfcs)

    def resolve(job):
        c, T, assoc = job
        return assoc if assoc is not None else associate(c, T, lmap, cfg)

    jobs = list(zip(cfcs, poses, assocs))
    if threads <= 1 or len(cfcs) <= 1:
        assocs = [resolve(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            assocs = list(pool.map(resolve, jobs))
    # one vectorized pass keeps the output independent of the thread count
    fmms = coefficients_batch(cfcs, poses, assocs, cfg) if cfcs else []
    results = list(zip(assocs, fmms))
    if cache is not None:
        for c, (assoc, _) in zip(cfcs, results):
            cache.store(c, assoc)
        cache.retain(cfcs)
    return [fmm for _, fmm in results]


def lidar_residual(q: np.ndarray, p: np.ndarray, fmm: FmmSet, jacobian: bool = False):
    """r = n.(R f + p) + c for every tuple; optional (N, 6) Jacobian in (dtheta, dp)."""
    R = quat_to_rotmat(q)
    r = np.sum(fmm.n * (fmm.f @ R.T + p), axis=1) + fmm.c
    if not jacobian:
        return r
    J = np.empty((len(r), 6))
    J[:, :3] = np.cross(fmm.f, fmm.n @ R)
    J[:, 3:] = fmm.n
    return r, J
