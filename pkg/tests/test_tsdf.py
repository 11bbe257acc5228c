import numpy as np
import pytest

from pairgen.errors import DegenerateInputError
from pairgen.geometry import DepthMap, Intrinsics, PointCloud, Pose, reproject, transform
from pairgen.scenes import look_at, sphere_scene
from pairgen.tsdf import (
    MaskPairSample, TsdfVolume, make_mask_sample, penetration_mask, tsdf_extract_points, tsdf_integrate,
    voxel_downsample,
)

K = Intrinsics(48, 48, 24, 24, 48, 48)


def plane_volume():
    vol = TsdfVolume.around([-0.6, -0.6, 0.8], [0.6, 0.6, 1.2], 0.02)
    depth = DepthMap(np.ones(K.shape), K)
    return vol, depth


def test_plane_integration_near_surface():
    vol, depth = plane_volume()
    tsdf_integrate(vol, depth, Pose.identity())
    i, j, k = np.nonzero(vol.weight > 0)
    centers = vol.origin + vol.voxel_size * np.stack([i, j, k], 1)
    near = np.abs(centers[:, 2] - 1.0) < 1e-9
    assert near.any()
    assert np.all(np.abs(vol.sdf[i[near], j[near], k[near]]) < vol.voxel_size)
    # along-ray distance equals (1 - z) for a fronto-parallel plane
    assert np.allclose(vol.sdf[i, j, k], 1.0 - centers[:, 2], atol=1e-12)


def test_integrate_twice_doubles_weight():
    vol, depth = plane_volume()
    tsdf_integrate(vol, depth, Pose.identity())
    once = vol.copy()
    tsdf_integrate(vol, depth, Pose.identity())
    assert np.allclose(vol.sdf, once.sdf, atol=1e-15)
    assert np.array_equal(vol.weight, 2 * once.weight)


def test_empty_map_and_intrinsics_mismatch():
    vol, depth = plane_volume()
    tsdf_integrate(vol, DepthMap.empty(K), Pose.identity())
    assert not vol.weight.any() and not vol.sdf.any()
    tsdf_integrate(vol, depth, Pose.identity())
    other = Intrinsics(40, 40, 24, 24, 48, 48)
    with pytest.raises(ValueError):
        tsdf_integrate(vol, DepthMap(np.ones(K.shape), other), Pose.identity())


def test_weight_cap():
    vol, depth = plane_volume()
    for _ in range(70):
        tsdf_integrate(vol, depth, Pose.identity())
    assert vol.weight.max() == 64


def test_extract_plane():
    vol, depth = plane_volume()
    tsdf_integrate(vol, depth, Pose.identity())
    pts = tsdf_extract_points(vol).points
    assert len(pts) > 100
    assert np.max(np.abs(pts[:, 2] - 1.0)) < vol.voxel_size / 2


def test_extract_sphere():
    K2 = Intrinsics(96, 96, 64, 64, 128, 128)
    scene = sphere_scene(1.0)
    vol = TsdfVolume.around([-1.1] * 3, [1.1] * 3, 0.02)
    for a in np.linspace(0, 2 * np.pi, 8, endpoint=False):
        eye = 3.0 * np.array([np.cos(a), 0.3, np.sin(a)])
        tsdf_integrate(vol, scene.render(K2, look_at(eye, [0, 0, 0])), look_at(eye, [0, 0, 0]))
    r = np.linalg.norm(tsdf_extract_points(vol).points, axis=1)
    assert r.size > 1000
    assert r.min() >= 0.98 and r.max() <= 1.02


def test_extract_empty_volume():
    assert len(tsdf_extract_points(TsdfVolume(np.zeros(3), 0.1, (4, 4, 4)))) == 0


def test_voxel_downsample_examples():
    one = PointCloud(np.random.default_rng(0).uniform(0.01, 0.09, size=(20, 3)))
    out = voxel_downsample(one, 0.1)
    assert len(out) == 1 and np.allclose(out.points[0], one.points.mean(axis=0))
    grid = np.stack(np.meshgrid(*[np.arange(4) * 0.3 + 0.05] * 3, indexing="ij"), -1).reshape(-1, 3)
    out = voxel_downsample(PointCloud(grid), 0.2)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, grid))
    pair = voxel_downsample(PointCloud([[0, 0, 0], [0.3, 0, 0]]), 0.5)
    assert np.allclose(pair.points, [[0.15, 0, 0]])
    assert len(voxel_downsample(PointCloud(), 0.1)) == 0
    with pytest.raises(ValueError):
        voxel_downsample(one, 0.0)


def test_voxel_downsample_properties(rng):
    pts = rng.uniform(-1, 1, size=(3000, 3))
    out = voxel_downsample(PointCloud(pts), 0.25)
    assert len(out) <= len(pts)
    keys = {tuple(k) for k in np.floor(pts / 0.25).astype(int)}
    assert len(out) == len(keys)
    # brute-force centroids
    groups = {}
    for p in pts:
        groups.setdefault(tuple(np.floor(p / 0.25).astype(int)), []).append(p)
    ref = np.array([np.mean(groups[k], axis=0) for k in sorted(groups)])
    got = out.points[np.lexsort(np.floor(out.points / 0.25).astype(int).T[::-1])]
    assert np.allclose(got, ref, atol=1e-12)
    again = voxel_downsample(out, 0.25)
    assert np.array_equal(again.points, out.points)


def test_penetration_mask_hand_values():
    s, d = np.array([[1.05]]), np.array([[1.0]])
    assert penetration_mask(s, d, 0.1)[0, 0]
    assert not penetration_mask(s, d, 0.03)[0, 0]
    assert not penetration_mask(np.array([[1.0]]), np.array([[0.0]]), 0.1)[0, 0]


def test_make_mask_sample_identical_clouds(rng):
    pts = rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 2], size=(500, 3))
    s = make_mask_sample(PointCloud(pts), PointCloud(pts), Pose.identity(), K, 0.05)
    assert np.array_equal(s.gt_mask, s.input.valid)
    assert s.input.valid.any()


def test_make_mask_sample_matches_definition(rng):
    dense = PointCloud(rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 2], size=(4000, 3)))
    sparse = PointCloud(rng.uniform([-0.5, -0.5, 1], [0.5, 0.5, 2], size=(300, 3)))
    view = Pose.from_axis_angle([0, 1, 0], 0.05, [0.02, 0, 0.1])
    s = make_mask_sample(dense, sparse, view, K, 0.05)
    Is = reproject(transform(sparse, view), K).values
    Id = reproject(transform(dense, view), K).values
    assert np.array_equal(s.input.values, Is) and np.array_equal(s.reference.values, Id)
    assert np.array_equal(s.gt_mask, (Is > 0) & (Id > 0) & ((Is - Id) ** 2 < 0.05**2))
    assert not np.any(s.gt_mask & ~s.labeled)


def test_make_mask_sample_errors():
    with pytest.raises(DegenerateInputError):
        make_mask_sample(PointCloud(), PointCloud([[0, 0, 1.0]]), Pose.identity(), K)
    with pytest.raises(ValueError):
        make_mask_sample(PointCloud([[0, 0, 1.0]]), PointCloud([[0, 0, 1.0]]), Pose.identity(), K, 0.0)
    d = DepthMap.empty(K)
    with pytest.raises(ValueError):
        MaskPairSample(d, np.ones(K.shape, bool), d)
