import numpy as np
import pytest

from miliom.frontend import BODY, PLANE, FeatureCloud
from miliom.geometry import exp_rotvec, rotation_angle
from miliom.keyframes import KeyframeConfig, KeyframeStore, export_global_map

IDQ = np.array([1.0, 0.0, 0.0, 0.0])


def cloud(xyz=((1.0, 2.0, 3.0),)):
    xyz = np.asarray(xyz, dtype=float)
    return FeatureCloud(0.0, 0.1, xyz, np.zeros(len(xyz)), np.full(len(xyz), PLANE), np.ones(len(xyz)), BODY)


def test_empty_store_admits_first():
    store = KeyframeStore()
    kf = store.consider_admit(IDQ, np.zeros(3), cloud())
    assert kf is not None and kf.id == 0 and len(store) == 1


def test_candidate_1p5m_from_all_admitted():
    store = KeyframeStore()
    store.consider_admit(IDQ, np.zeros(3), cloud())
    assert store.consider_admit(IDQ, np.array([1.5, 0, 0]), cloud()) is not None


def test_close_and_small_rotation_rejected():
    store = KeyframeStore()
    store.consider_admit(IDQ, np.zeros(3), cloud())
    q5 = exp_rotvec([0, 0, np.deg2rad(5)])
    assert store.consider_admit(q5, np.array([0.5, 0, 0]), cloud()) is None
    # rotation beyond 10 degrees from every neighbor admits even when close
    q12 = exp_rotvec([0, 0, np.deg2rad(12)])
    assert store.consider_admit(q12, np.array([0.5, 0, 0]), cloud()) is not None


def test_knn_queries():
    store = KeyframeStore()
    assert store.knn_key_poses(np.zeros(3), 3) == []
    store.consider_admit(IDQ, np.zeros(3), cloud())
    assert [kf.id for kf in store.knn_key_poses(np.ones(3), 4)] == [0]
    assert store.knn_key_poses(np.ones(3), 0) == []


def test_knn_matches_brute_force_on_grid():
    store = KeyframeStore()
    for x in range(6):
        for y in range(6):
            store.consider_admit(IDQ, np.array([x * 1.3, y * 1.7, 0.0]), cloud())
    assert len(store) == 36
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(-1, 9, 3)
        got = [kf.id for kf in store.knn_key_poses(p, 10)]
        brute = list(np.argsort(np.linalg.norm(store.positions - p, axis=1), kind="stable")[:10])
        assert sorted(got) == sorted(brute)


def test_admission_replay_against_brute_force():
    rng = np.random.default_rng(1)
    store = KeyframeStore()
    cfg = store.cfg
    for _ in range(300):
        p = rng.uniform(-5, 5, 3)
        q = exp_rotvec(rng.normal(scale=0.3, size=3))
        if len(store):
            d = np.linalg.norm(store.positions - p, axis=1)
            near = np.argsort(d)[: cfg.knn]
            ang = rotation_angle(q, np.array([store.keyframes[i].q for i in near]))
            expected = bool(np.all(d[near] > cfg.distance) or np.all(ang > cfg.angle))
        else:
            expected = True
        assert (store.consider_admit(q, p, cloud()) is not None) == expected
    ids = [kf.id for kf in store.keyframes]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)


def test_mutual_neighbors_are_separated():
    rng = np.random.default_rng(2)
    store = KeyframeStore()
    for _ in range(200):
        store.consider_admit(exp_rotvec(rng.normal(scale=0.2, size=3)), rng.uniform(-4, 4, 3), cloud())
    K = store.cfg.knn
    for a in store.keyframes:
        for b in store.knn_key_poses(a.p, K + 1):
            if b.id == a.id or a.id not in [k.id for k in store.knn_key_poses(b.p, K + 1)]:
                continue
            assert np.linalg.norm(a.p - b.p) > 1.0 or rotation_angle(a.q, b.q) > np.pi / 18


def test_cap_evicts_farthest():
    store = KeyframeStore(KeyframeConfig(cap=3))
    for x in (0.0, 2.0, 4.0, 6.0):
        store.consider_admit(IDQ, np.array([x, 0, 0]), cloud())
    assert len(store) == 3 and sorted(kf.p[0] for kf in store.keyframes) == [2.0, 4.0, 6.0]


def test_non_finite_pose_rejected():
    with pytest.raises(ValueError):
        KeyframeStore().consider_admit(IDQ, np.array([np.nan, 0, 0]), cloud())


def test_export_global_map():
    xyz, kind = export_global_map(KeyframeStore())
    assert xyz.shape == (0, 3) and len(kind) == 0
    store = KeyframeStore()
    c = cloud([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    store.consider_admit(IDQ, np.zeros(3), c)
    xyz, kind = export_global_map(store)
    np.testing.assert_array_equal(xyz, c.xyz)
    np.testing.assert_array_equal(kind, c.kind)


def test_export_invariant_to_admission_order():
    rng = np.random.default_rng(3)
    entries = [(exp_rotvec(rng.normal(size=3)), rng.uniform(-20, 20, 3), cloud(rng.normal(size=(5, 3))))
               for _ in range(8)]
    maps = []
    for order in (range(8), reversed(range(8))):
        store = KeyframeStore()
        for i in order:
            assert store.consider_admit(*entries[i]) is not None
        xyz, _ = export_global_map(store)
        maps.append(sorted(map(tuple, np.round(xyz, 12))))
    assert maps[0] == maps[1]


def test_equidistant_neighbors_prefer_newest():
    store = KeyframeStore()
    for i in range(15):
        store.consider_admit(exp_rotvec([0, 0, np.deg2rad(12.0) * i]), np.zeros(3), cloud())
    assert [kf.id for kf in store.knn_key_poses(np.zeros(3), 4)] == [14, 13, 12, 11]
