import numpy as np
import pytest

from miliom.frontend import (
    BODY,
    EDGE,
    LOCAL,
    PLANE,
    FeatureCloud,
    FeatureConfig,
    FrameSkipped,
    deskew,
    deskew_piecewise,
    extract_features,
    merge_scfc,
    smoothness,
    transform_to_local,
)
from miliom.geometry import RigidTransform, exp_rotvec, quat_to_rotmat, transform_point
from miliom.imu import NavState, propagate, relative_transform
from miliom.sim import (
    Component,
    ImuNoiseSpec,
    LidarConfig,
    Patch,
    RawScan,
    TrajectorySpec,
    WorldModel,
    figure_eight,
    room_world,
    simulate_imu,
    simulate_lidar,
)

STILL = TrajectorySpec(ramp=0.0)


def wall(x=5.0):
    return WorldModel([Patch([x, -50.0, -50.0], [0, 100.0, 0], [0, 0, 100.0])])


def corner_world():
    # walls x = 4 and y = 3 meeting along the vertical line (4, 3, z)
    return WorldModel([
        Patch([4.0, -50.0, -50.0], [0, 53.0, 0], [0, 0, 100.0]),
        Patch([-50.0, 3.0, -50.0], [54.0, 0, 0], [0, 0, 100.0]),
    ])


def random_cloud(rng, n, t_start=0.0, span=0.1, lidar=1):
    return FeatureCloud(
        t_start, t_start + span, rng.normal(scale=5, size=(n, 3)), np.sort(rng.uniform(0, span, n)),
        rng.integers(0, 2, n), np.full(n, lidar),
    )


def test_smoothness_straight_line_and_right_angle():
    line = np.c_[np.linspace(0, 1, 11), np.zeros(11), np.zeros(11)] + [5, 0, 0]
    c, valid = smoothness(line, np.zeros(11, int), 5)
    assert valid[5] and c[5] < 1e-12
    bent = np.r_[np.c_[np.arange(-5, 1), np.zeros(6)], np.c_[np.zeros(5), np.arange(1, 6)]]
    bent = np.c_[bent, np.zeros(11)] * 0.1 + [5, 5, 0]
    c, _ = smoothness(bent, np.zeros(11, int), 5)
    assert c[5] == pytest.approx(np.sqrt(2) / 2)


def test_flat_wall_yields_no_edges():
    cfg = LidarConfig(noise_sigma=0.0, horizontal_res_deg=0.4)
    scan = simulate_lidar(wall(5.0), STILL, cfg, 0)
    feats = extract_features(scan)
    assert np.count_nonzero(feats.kind == EDGE) == 0
    plane_rings = {scan.ring[np.flatnonzero((scan.xyz == p).all(1))[0]] for p in feats.planes}
    assert plane_rings == set(np.unique(scan.ring))


def test_corner_edges_near_the_corner():
    cfg = LidarConfig(noise_sigma=0.0, horizontal_res_deg=0.4)
    scan = simulate_lidar(corner_world(), STILL, cfg, 0)
    feats = extract_features(scan)
    edges = feats.edges
    assert len(edges) >= 8
    # one beam step at the corner range, horizontally
    corner_range = np.hypot(4.0, 3.0)
    step = corner_range * np.deg2rad(0.4) * 1.5
    d = np.hypot(edges[:, 0] - 4.0, edges[:, 1] - 3.0)
    assert np.all(d <= step)


def test_caps_bound_feature_counts():
    cfg = LidarConfig(noise_sigma=0.01)
    scan = simulate_lidar(room_world(), figure_eight(), cfg, 12, np.random.default_rng(0))
    fc = FeatureConfig()
    feats = extract_features(scan, fc)
    rings = len(np.unique(scan.ring))
    assert np.count_nonzero(feats.kind == EDGE) <= fc.edge_cap * fc.sectors * rings
    assert np.count_nonzero(feats.kind == PLANE) <= fc.plane_cap * fc.sectors * rings
    assert np.count_nonzero(feats.kind == EDGE) > 0


def test_short_rings_are_skipped():
    xyz = np.c_[np.full(5, 5.0), np.linspace(-1, 1, 5), np.zeros(5)]
    scan = RawScan(1, 0.0, 0.1, 16, np.zeros(5), np.linspace(0, 0.01, 5), xyz)
    feats = extract_features(scan)
    assert len(feats) == 0 and feats.diagnostics["rings_skipped"] == 1


def test_extraction_independent_of_ring_order():
    cfg = LidarConfig(noise_sigma=0.01)
    scan = simulate_lidar(room_world(), figure_eight(), cfg, 40, np.random.default_rng(1))
    perm = np.random.default_rng(2).permutation(len(scan))
    shuffled = RawScan(1, scan.t_start, scan.t_end, 16, scan.ring[perm], scan.dt[perm], scan.xyz[perm])
    a, b = extract_features(scan), extract_features(shuffled)
    key = lambda f: sorted(map(tuple, np.c_[f.xyz, f.kind]))
    assert key(a) == key(b)


def test_feature_kinds_invariant_to_rigid_world_motion():
    # moving the whole scene rigidly leaves sensor-frame data unchanged
    T = RigidTransform(exp_rotvec([0.1, -0.3, 1.2]), [4.0, -2.0, 0.5])
    world = room_world()
    moved = WorldModel([Patch(T.apply(p.corner), T.R @ p.e1, T.R @ p.e2) for p in world.patches])
    traj = figure_eight()
    cfg = LidarConfig(noise_sigma=0.0, horizontal_res_deg=1.0)
    scan = simulate_lidar(world, traj, cfg, 7)
    # re-cast from the moved pose at each firing time
    t = scan.t_start + scan.dt
    origins = np.einsum("nij,nj->ni", quat_to_rotmat(traj.orientation(t)), np.zeros_like(scan.xyz)) + traj.position(t)
    dirs = np.einsum("nij,nj->ni", quat_to_rotmat(traj.orientation(t)), scan.xyz)
    rng_ = moved.raycast(T.apply(origins), dirs @ T.R.T / np.linalg.norm(dirs, axis=1)[:, None])
    np.testing.assert_allclose(rng_, np.linalg.norm(scan.xyz, axis=1), rtol=1e-9)
    a = extract_features(scan)
    recast = RawScan(1, scan.t_start, scan.t_end, 16, scan.ring, scan.dt,
                     scan.xyz / np.linalg.norm(scan.xyz, axis=1)[:, None] * rng_[:, None])
    b = extract_features(recast)
    np.testing.assert_array_equal(a.kind, b.kind)
    np.testing.assert_allclose(a.xyz, b.xyz, atol=1e-8)


def test_merge_single_lidar_passthrough():
    rng = np.random.default_rng(0)
    c = random_cloud(rng, 30, t_start=1.0)
    m = merge_scfc([c], 1.0, 1.1)
    np.testing.assert_array_equal(m.xyz, c.xyz)
    np.testing.assert_array_equal(m.dt, c.dt)
    assert (m.t_start, m.t_end) == (1.0, c.t_end)


def test_merge_two_lidars_union_and_rebase():
    rng = np.random.default_rng(1)
    a = random_cloud(rng, 20, t_start=1.0)
    b = random_cloud(rng, 15, t_start=1.05, lidar=2)
    late = random_cloud(rng, 10, t_start=1.1, lidar=2)
    m = merge_scfc([a, b, late], 1.0, 1.1)
    assert len(m) == 35
    assert m.t_end == pytest.approx(1.15)
    np.testing.assert_allclose(m.dt[m.source == 2], b.dt + 0.05)
    assert set(m.source) == {1, 2}


def test_merge_without_primary_is_skipped():
    rng = np.random.default_rng(2)
    with pytest.raises(FrameSkipped):
        merge_scfc([random_cloud(rng, 5, 1.05, lidar=2)], 1.0, 1.1)


def test_deskew_identity_is_bit_exact():
    c = random_cloud(np.random.default_rng(3), 50)
    out = deskew(c, RigidTransform.identity())
    np.testing.assert_array_equal(out.xyz, c.xyz)
    assert out.frame == BODY and len(out) == len(c)


def test_deskew_endpoint_translation():
    c = FeatureCloud(0.0, 0.1, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], [0.0, 0.1], [PLANE, EDGE], [1, 1])
    out = deskew(c, RigidTransform(t=[0.5, 0.0, 0.0]))
    np.testing.assert_allclose(out.xyz, [[1.0, 2.0, 3.0], [1.5, 2.0, 3.0]])
    np.testing.assert_array_equal(out.kind, c.kind)


def test_deskew_clamps_out_of_span_times(caplog):
    c = FeatureCloud(0.0, 0.1, [[1.0, 0, 0]], [0.2], [PLANE], [1])
    out = deskew(c, RigidTransform(t=[1.0, 0, 0]))
    np.testing.assert_allclose(out.xyz, [[2.0, 0, 0]])
    assert out.diagnostics["clamped"] == 1


def moving_wall_case(deskewer):
    traj = TrajectorySpec(x=Component(0.0, 1.0), yaw=Component(0.0, 0.5), ramp=0.0)
    cfg = LidarConfig(noise_sigma=0.0)
    scan = simulate_lidar(wall(5.0), traj, cfg, 3)
    cloud = FeatureCloud(scan.t_start, scan.t_end, scan.xyz, scan.dt, np.full(len(scan), PLANE), np.ones(len(scan)))
    imu = simulate_imu(traj, 1.0, noise=ImuNoiseSpec.noiseless())
    t0 = scan.t_start
    seed = NavState(traj.orientation(t0), traj.position(t0), traj.velocity(t0), t=t0)
    prop = propagate(seed, imu.slice(t0, scan.t_end))
    body = deskewer(cloud, prop)
    pose = RigidTransform(traj.orientation(t0), traj.position(t0))
    return pose.apply(cloud.xyz)[:, 0] - 5.0, pose.apply(body.xyz)[:, 0] - 5.0


def test_deskew_moving_sensor_lands_on_wall():
    raw, fixed = moving_wall_case(lambda c, prop: deskew(c, relative_transform(prop, c.t_start, c.t_end)))
    assert np.sqrt(np.mean(fixed**2)) < 2e-3
    assert np.sqrt(np.mean(raw**2)) > 1e-2


def test_piecewise_deskew_matches_on_wall():
    def run(c, prop):
        base = RigidTransform(prop.q[0], prop.p[0]).inverse()
        poses = [base @ RigidTransform(q, p) for q, p in zip(prop.q, prop.p)]
        return deskew_piecewise(c, prop.t, poses)

    _, fixed = moving_wall_case(run)
    assert np.sqrt(np.mean(fixed**2)) < 1e-6


def test_transform_to_local():
    rng = np.random.default_rng(4)
    body = deskew(random_cloud(rng, 40), RigidTransform.identity())
    np.testing.assert_array_equal(transform_to_local(body, RigidTransform.identity()).xyz, body.xyz)
    T = RigidTransform(exp_rotvec(rng.normal(size=3)), rng.normal(size=3))
    local = transform_to_local(body, T)
    assert local.frame == LOCAL
    oracle = np.array([transform_point(T, p) for p in body.xyz])
    np.testing.assert_allclose(local.xyz, oracle, atol=1e-12)
    np.testing.assert_allclose(T.inverse().apply(local.xyz), body.xyz, atol=1e-10)
    with pytest.raises(ValueError):
        transform_to_local(local, T)
