import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from wvd.errors import BehindCamera, DegenerateCloud, NonPositiveDepth
from wvd.geometry import (CameraExtrinsics, CameraIntrinsics, PointCloud, XyzImage,
                          normalize_pointcloud, project_point, project_points, rasterize_xyz,
                          reproject_points, unproject_depth, zbuffer)
from wvd.scene import random_video

K128 = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)


def random_pose(rng, scale=1.0):
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return CameraExtrinsics.from_rt(R, rng.normal(size=3) * scale)


# ---------------------------------------------------------------- normalization
def test_normalize_already_normalized():
    cloud = PointCloud([[1, 1, 1], [-1, -1, -1]])
    out, tf = normalize_pointcloud(cloud)
    assert np.array_equal(out.points, cloud.points)
    assert np.array_equal(tf.center, np.zeros(3)) and tf.scale == 1.0


def test_normalize_symmetric_pair():
    out, tf = normalize_pointcloud(PointCloud([[2, 0, 0], [4, 0, 0]]))
    assert np.allclose(out.points, [[-1, 0, 0], [1, 0, 0]])
    assert np.allclose(tf.center, [3, 0, 0]) and tf.scale == 1.0


def test_normalize_random_box(rng):
    pts = rng.uniform(5, 9, size=(100, 3))
    out, tf = normalize_pointcloud(PointCloud(pts))
    # brute-force bbox of the output
    lo, hi = out.points.min(axis=0), out.points.max(axis=0)
    assert np.all(lo >= -1) and np.all(hi <= 1)
    assert np.isclose(max(np.max(np.abs(lo)), np.max(np.abs(hi))), 1.0)
    assert np.allclose(lo + hi, 0.0, atol=1e-12)
    assert np.allclose(tf.invert(out.points), pts)


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloud):
        normalize_pointcloud(PointCloud(np.ones((5, 3))))
    with pytest.raises(DegenerateCloud):
        normalize_pointcloud(PointCloud(np.zeros((0, 3))))


@given(st.integers(0, 10_000))
def test_normalize_idempotent(seed):
    pts = np.random.default_rng(seed).normal(size=(50, 3)) * 3 + 7
    once, _ = normalize_pointcloud(PointCloud(pts))
    twice, tf = normalize_pointcloud(once)
    assert np.allclose(tf.center, 0, atol=1e-9) and abs(tf.scale - 1) < 1e-9
    assert np.allclose(once.points, twice.points, atol=1e-9)


# ---------------------------------------------------------------- cameras
def test_project_point_examples():
    E = CameraExtrinsics.identity()
    assert project_point([0, 0, 2], K128, E) == (64.0, 64.0, 2.0)
    u, v, d = project_point([0.64, 0, 2], K128, E)
    assert np.isclose(u, 96.0) and v == 64.0 and d == 2.0
    with pytest.raises(BehindCamera):
        project_point([0, 0, -1], K128, E)


@given(st.integers(0, 10_000))
def test_extrinsics_inverse_compose(seed):
    rng = np.random.default_rng(seed)
    E = random_pose(rng)
    assert abs(np.linalg.norm(E.quaternion) - 1) < 1e-9
    I = E.compose(E.inverse())
    assert np.allclose(I.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(I.translation, 0, atol=1e-9)


def test_extrinsics_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        CameraExtrinsics(np.array([2.0, 0, 0, 0]), np.zeros(3))


def test_look_at_axis_passes_through_target(rng):
    for _ in range(20):
        pos, tgt = rng.normal(size=3) * 3, rng.normal(size=3)
        E = CameraExtrinsics.look_at(pos, tgt)
        p = E.apply(tgt[None])[0]
        assert np.hypot(p[0], p[1]) < 1e-9 and p[2] > 0
        assert np.allclose(E.center, pos)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1, 1, 4, 4)
    K = CameraIntrinsics.default(32, 24)
    assert K.in_image() and K.shape == (24, 32)


# ---------------------------------------------------------------- rasterization
def test_rasterize_empty_view():
    img = rasterize_xyz(PointCloud(np.zeros((0, 3))), K128, CameraExtrinsics.identity())
    assert not img.valid.any()
    behind = PointCloud([[0, 0, -1.0]])
    assert not rasterize_xyz(behind, K128, CameraExtrinsics.identity()).valid.any()


def test_rasterize_single_point():
    E = CameraExtrinsics.from_rt(np.eye(3), [0, 0, 2.0])  # camera at world (0, 0, -2) looking +z
    img = rasterize_xyz(PointCloud([[0.0, 0, 0]]), K128, E, splat_radius=0)
    assert img.valid.sum() == 1 and img.valid[64, 64]
    assert np.array_equal(img.data[64, 64], [0, 0, 0])


def test_zbuffer_nearest_wins():
    E = CameraExtrinsics.identity()
    pts = np.array([[0.0, 0, 2.0], [0.0, 0, 1.0]])
    img = rasterize_xyz(PointCloud(pts), K128, E, splat_radius=0)
    assert np.array_equal(img.data[64, 64], [0, 0, 1.0])
    assert img.depth_buffer[64, 64] == 1.0


def test_zbuffer_tie_lower_index():
    pts = np.array([[0.001, 0, 1.0], [0.0, 0, 1.0]])
    winner, _ = zbuffer(pts, K128, CameraExtrinsics.identity(), splat_radius=0)
    assert winner[64, 64] == 0


def test_splat_radius_covers_neighbourhood():
    img = rasterize_xyz(PointCloud([[0.0, 0, 2.0]]), K128, CameraExtrinsics.identity(), splat_radius=1)
    assert img.valid.sum() == 9 and img.valid[63:66, 63:66].all()


@given(st.integers(0, 10_000))
def test_rasterize_round_trip_half_pixel(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(400, 3))
    K = CameraIntrinsics.default(32, 32)
    E = CameraExtrinsics.look_at(rng.normal(size=3) * 0.3 + [0, 0, -3], [0, 0, 0])
    img = rasterize_xyz(PointCloud(pts), K, E, splat_radius=0)
    vs, us = np.nonzero(img.valid)
    u, v, _ = project_points(img.data[img.valid], K, E)
    assert np.all(np.abs(u - us) <= 0.5) and np.all(np.abs(v - vs) <= 0.5)


# ---------------------------------------------------------------- unprojection
def test_unproject_optical_axis():
    depth = np.zeros((128, 128))
    valid = np.zeros((128, 128), bool)
    depth[64, 64], valid[64, 64] = 2.0, True
    img = unproject_depth(depth, valid, K128, CameraExtrinsics.identity())
    assert np.array_equal(img.data[64, 64], [0, 0, 2.0])
    assert img.valid.sum() == 1


def test_unproject_all_invalid():
    img = unproject_depth(np.zeros((8, 8)), np.zeros((8, 8), bool), CameraIntrinsics.default(8, 8),
                          CameraExtrinsics.identity())
    assert not img.valid.any() and not img.data.any()


def test_unproject_nonpositive_depth():
    valid = np.ones((4, 4), bool)
    with pytest.raises(NonPositiveDepth):
        unproject_depth(np.zeros((4, 4)), valid, CameraIntrinsics.default(4, 4), CameraExtrinsics.identity())


def test_project_unproject_round_trip(rng):
    # 1000 random points, each placed at its projected pixel with its depth
    E = random_pose(rng)
    K = CameraIntrinsics(80.0, 90.0, 50.0, 40.0, 100, 80)
    err = []
    for _ in range(1000):
        cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
        p = E.inverse().apply(cam[None])[0]
        u, v, d = project_point(p, K, E)
        ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        back = E.rotation.T @ (d * ray - E.translation)
        err.append(np.abs(back - p).max())
    assert max(err) < 1e-6


def test_unproject_inverts_projection_image(rng):
    K = CameraIntrinsics.default(16, 16)
    E = random_pose(rng)
    depth = rng.uniform(0.5, 4, size=(16, 16))
    valid = rng.random((16, 16)) < 0.7
    img = unproject_depth(depth, valid, K, E)
    u, v, d = project_points(img.data[valid], K, E)
    vs, us = np.nonzero(valid)
    assert np.allclose(u, us, atol=1e-9) and np.allclose(v, vs, atol=1e-9)
    assert np.allclose(d, depth[valid], atol=1e-9)


def test_xyz_image_sentinel():
    data = np.ones((2, 2, 3))
    valid = np.array([[True, False], [False, True]])
    img = XyzImage(data, valid)
    assert np.array_equal(img.data[~valid], np.zeros((2, 3)))
    assert data.all()  # caller's array untouched


# ---------------------------------------------------------------- reprojection
def test_reproject_looking_away():
    cloud = PointCloud(np.random.default_rng(0).uniform(-1, 1, size=(200, 3)))
    E = CameraExtrinsics.look_at([0, 0, -3], [0, 0, -6])
    img, cover = reproject_points(cloud, CameraIntrinsics.default(), E)
    assert not cover.any() and not img.valid.any()


def test_reproject_union_and_partial():
    r = random_video(3)
    frames = r.video.frames
    single = PointCloud(frames[0].xyz.points())
    union = r.video.point_cloud()
    K, E0 = r.cameras[0]
    _, cov_single = reproject_points(single, K, E0, 0)
    _, cov_union = reproject_points(union, K, E0, 0)
    assert cov_union.sum() >= cov_single.sum()
    # full scene cloud from the source camera
    _, cov_full = reproject_points(r.cloud, K, E0, 0)
    assert cov_full.sum() >= cov_single.sum()
    # two-frame union from an in-between camera
    two = PointCloud.concat([single, PointCloud(frames[-1].xyz.points())])
    mid = r.cameras[len(frames) // 2][1]
    img, cov = reproject_points(two, K, mid, 1)
    assert 0 < cov.sum() < K.width * K.height
    assert np.array_equal(cov, img.valid) and cov is not img.valid


def test_cross_view_consistency():
    r = random_video(5)
    a, b = r.video.frames[0], r.video.frames[2]
    pa, pb = a.xyz.points(), b.xyz.points()
    da, db = a.xyz.depth_buffer[a.xyz.valid], b.xyz.depth_buffer[b.xyz.valid]
    Ka, Ea = a.camera
    Kb, Eb = b.camera
    ia = np.nonzero(a.xyz.valid.ravel())[0]
    ib = np.nonzero(b.xyz.valid.ravel())[0]
    rays_a = Ka.pixel_rays().reshape(-1, 3)[ia]
    rays_b = Kb.pixel_rays().reshape(-1, 3)[ib]
    wa = (rays_a * da[:, None] - Ea.translation) @ Ea.rotation
    wb = (rays_b * db[:, None] - Eb.translation) @ Eb.rotation
    # pairs whose XYZ values agree must unproject to agreeing world points
    from scipy.spatial import cKDTree
    pairs = cKDTree(pb).query_ball_point(pa, 1e-6)
    for i, js in enumerate(pairs):
        for j in js:
            assert np.abs(wa[i] - wb[j]).max() < 1e-6
    assert np.abs(wa - pa).max() < 1e-6 and np.abs(wb - pb).max() < 1e-6
