"""Volumetric fusion and the dense/sparse mask-pair data preparation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError
from .geometry import DepthMap, Intrinsics, PointCloud, Pose, reproject, transform

MAX_WEIGHT = 64.0


@dataclass(eq=False)
class TsdfVolume:
    """Dense voxel grid of truncated signed distances.

    Voxel ``(i, j, k)`` has its centre at ``origin + voxel_size * (i, j, k)``.
    Positive distances lie in front of the observed surface.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: Optional[float] = None
    sdf: Optional[np.ndarray] = None
    weight: Optional[np.ndarray] = None
    intrinsics: Optional[Intrinsics] = None

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.truncation is None:
            self.truncation = 4.0 * self.voxel_size
        if self.sdf is None:
            self.sdf = np.zeros(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def around(cls, lo, hi, voxel_size: float, margin: Optional[float] = None) -> "TsdfVolume":
        """Volume covering the box ``[lo, hi]`` padded by ``margin`` (default: truncation)."""
        margin = 4.0 * voxel_size if margin is None else margin
        lo = np.asarray(lo, dtype=np.float64) - margin
        hi = np.asarray(hi, dtype=np.float64) + margin
        dims = np.floor((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, tuple(dims))

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation,
                          self.sdf.copy(), self.weight.copy(), self.intrinsics)


def tsdf_integrate(volume: TsdfVolume, depth: DepthMap, camera_pose: Pose) -> TsdfVolume:
    """Fuse one depth map seen from ``camera_pose`` (camera-to-world) in place.

    Only voxels whose projective distance lies inside the truncation band are
    touched; each observation has weight 1 and weights saturate at 64.
    """
    if volume.intrinsics is None:
        volume.intrinsics = depth.intrinsics
    elif volume.intrinsics != depth.intrinsics:
        raise ValueError("depth intrinsics differ from those already fused into the volume")
    if not depth.valid.any():
        return volume
    nx, ny, nz = volume.dims
    slab = max(1, int(2_000_000 // max(ny * nz, 1)))
    for i0 in range(0, nx, slab):
        _integrate_slab(volume, depth, camera_pose, i0, min(i0 + slab, nx))
    return volume


def _integrate_slab(volume: TsdfVolume, depth: DepthMap, camera_pose: Pose, i0: int, i1: int):
    K = depth.intrinsics
    _, ny, nz = volume.dims
    idx3 = np.indices((i1 - i0, ny, nz)).reshape(3, -1).T
    idx3[:, 0] += i0
    world = volume.origin + volume.voxel_size * idx3
    cam = (world - camera_pose.translation) @ camera_pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(K.fx * cam[:, 0] / z + K.cx + 0.5)
        v = np.floor(K.fy * cam[:, 1] / z + K.cy + 0.5)
    ok = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    idx = np.nonzero(ok)[0]
    d = depth.values[v[idx].astype(np.intp), u[idx].astype(np.intp)]
    dist = d - z[idx]
    band = (d > 0) & (np.abs(dist) <= volume.truncation)
    idx, dist = idx[band], dist[band]

    sdf = volume.sdf[i0:i1].reshape(-1)
    w = volume.weight[i0:i1].reshape(-1)
    w_old = w[idx]
    sdf[idx] = (w_old * sdf[idx] + dist) / (w_old + 1.0)
    w[idx] = np.minimum(w_old + 1.0, MAX_WEIGHT)


def tsdf_extract_points(volume: TsdfVolume) -> PointCloud:
    """Zero crossings of the distance field along the three grid axes.

    Crossings between observed neighbours whose distances differ by more than
    the truncation distance come from occlusion edges and are dropped.
    """
    pts = []
    sdf, w = volume.sdf, volume.weight
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        s0, s1 = sdf[tuple(a)], sdf[tuple(b)]
        seen = (w[tuple(a)] > 0) & (w[tuple(b)] > 0)
        cross = seen & (((s0 > 0) & (s1 <= 0)) | ((s0 <= 0) & (s1 > 0)))
        cross &= np.abs(s0 - s1) <= volume.truncation
        i, j, k = np.nonzero(cross)
        if i.size == 0:
            continue
        f0, f1 = s0[i, j, k], s1[i, j, k]
        frac = f0 / (f0 - f1)
        base = np.stack([i, j, k], axis=1).astype(np.float64)
        base[:, axis] += frac
        pts.append(volume.origin + volume.voxel_size * base)
    if not pts:
        return PointCloud()
    return PointCloud(np.concatenate(pts))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid per occupied origin-aligned voxel, ordered by voxel index.

    Centroids are clamped to their members' bounding box so a second pass
    over the output hits the same voxels.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    p = cloud.points
    if len(p) == 0:
        return PointCloud()
    keys = np.floor(p / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    order = np.argsort(flat, kind="stable")
    flat, ps = flat[order], p[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(flat))[0] + 1])
    counts = np.diff(np.append(starts, len(flat)))
    sums = np.add.reduceat(ps, starts, axis=0)
    lo = np.minimum.reduceat(ps, starts, axis=0)
    hi = np.maximum.reduceat(ps, starts, axis=0)
    return PointCloud(np.clip(sums / counts[:, None], lo, hi))


@dataclass(frozen=True, eq=False)
class MaskPairSample:
    """Penetrated input, its ground-truth validity mask and the clean reference.

    Only pixels where ``input`` is non-empty carry a label.
    """

    input: DepthMap
    gt_mask: np.ndarray
    reference: DepthMap

    def __post_init__(self):
        if not (self.input.shape == self.reference.shape == self.gt_mask.shape):
            raise ValueError("mask sample grids differ in shape")
        if np.any(self.gt_mask & ~self.input.valid):
            raise ValueError("gt_mask may only be true on non-empty input pixels")

    @property
    def labeled(self) -> np.ndarray:
        return self.input.valid


def penetration_mask(sparse_depth: np.ndarray, dense_depth: np.ndarray, tau_gt: float) -> np.ndarray:
    """Valid where the sparse depth agrees with the dense one to within ``tau_gt``."""
    both = (sparse_depth > 0) & (dense_depth > 0)
    return both & ((sparse_depth - dense_depth) ** 2 < tau_gt**2)


def make_mask_sample(dense: PointCloud, sparse: PointCloud, view: Pose, intrinsics: Intrinsics,
                     tau_gt: float = 0.05) -> MaskPairSample:
    """Re-project both clouds with the world-to-camera transform ``view`` and label the sparse map."""
    if tau_gt <= 0:
        raise ValueError("tau_gt must be positive")
    if len(dense) == 0 or len(sparse) == 0:
        raise DegenerateInputError("dense and sparse clouds must be non-empty")
    I_d = reproject(transform(dense, view), intrinsics)
    I_s = reproject(transform(sparse, view), intrinsics)
    return MaskPairSample(I_s, penetration_mask(I_s.values, I_d.values, tau_gt), I_d)
