"""Pinhole camera math, rigid transforms and depth <-> point cloud conversion.

Conventions
-----------
* Camera frame is x right, y down, z forward.
* Integer pixel ``(u, v)`` is the ray through ``(u, v)`` exactly, no half-pixel
  offset, so ``reproject(unproject(d))`` is bit-exact.
* Projection rounds to nearest with ties toward +inf (``floor(x + 0.5)``).
* Depth 0 marks an empty pixel, in memory and on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, SamplingExhaustedError

EMPTY = 0.0
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def vector(self) -> np.ndarray:
        """Condition vector ``[fx, fy, cx, cy]`` fed to the denoiser."""
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping ``p`` to ``R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotation_matrix(axis, angle_rad), translation)

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "Pose":
        """Build from 12 numbers: R row-major, then t."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (12,):
            raise ValueError(f"expected 12 pose values, got {v.size}")
        return cls(v[:9].reshape(3, 3), v[9:])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def rotation_matrix(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues formula. A zero angle yields the identity exactly."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    a = a / n
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.intrinsics.shape:
            raise ValueError(f"depth grid {v.shape} does not match intrinsics {self.intrinsics.shape}")
        filled = v != EMPTY
        if not np.all(np.isfinite(v)) or np.any(v[filled] < 0):
            raise ValueError("depth values must be finite and non-negative (0 = empty)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def empty(cls, intrinsics: Intrinsics) -> "DepthMap":
        return cls(np.zeros(intrinsics.shape), intrinsics)

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return self.intrinsics == other.intrinsics and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)


def unproject(depth: DepthMap) -> PointCloud:
    """One point per non-empty pixel, row-major pixel order."""
    K = depth.intrinsics
    v, u = np.nonzero(depth.valid)
    d = depth.values[v, u]
    x = (u - K.cx) * d / K.fx
    y = (v - K.cy) * d / K.fy
    return PointCloud(np.stack([x, y, d], axis=1))


def transform(cloud: PointCloud, pose: Pose) -> PointCloud:
    return PointCloud(cloud.points @ pose.rotation.T + pose.translation)


def project_pixels(points: np.ndarray, intrinsics: Intrinsics):
    """Pixel indices and depths of the points that land inside the image.

    Returns ``(rows, cols, depths, index)`` where ``index`` selects the kept
    input points.
    """
    K = intrinsics
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    front = z > 0
    idx = np.nonzero(front)[0]
    x, y, z = x[idx], y[idx], z[idx]
    u = np.floor(K.fx * x / z + K.cx + 0.5)
    v = np.floor(K.fy * y / z + K.cy + 0.5)
    inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return v[inside].astype(np.intp), u[inside].astype(np.intp), z[inside], idx[inside]


def reproject(cloud: PointCloud, intrinsics: Intrinsics) -> DepthMap:
    """Z-buffered splat of a camera-frame cloud; unhit pixels stay empty."""
    rows, cols, z, _ = project_pixels(cloud.points, intrinsics)
    flat = np.full(intrinsics.width * intrinsics.height, np.inf)
    np.minimum.at(flat, rows * intrinsics.width + cols, z)
    flat[np.isinf(flat)] = EMPTY
    return DepthMap(flat.reshape(intrinsics.shape), intrinsics)


def overlap_ratio(
    source: PointCloud, target: PointCloud, gt: Pose, radius: float = 0.05, symmetric: bool = False
) -> float:
    """Fraction of source points with a target neighbour within ``radius`` after ``gt``.

    With ``symmetric=True`` the minimum of both directions is returned.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(source) == 0 or len(target) == 0:
        raise DegenerateInputError("overlap of an empty point cloud is undefined")
    moved = transform(source, gt).points
    d, _ = cKDTree(target.points).query(moved, k=1, distance_upper_bound=radius)
    forward = float(np.mean(d <= radius))
    if not symmetric:
        return forward
    back = transform(target, gt.inverse()).points
    d, _ = cKDTree(source.points).query(back, k=1, distance_upper_bound=radius)
    return min(forward, float(np.mean(d <= radius)))


def _as_ranges(value) -> tuple[tuple[float, float], ...]:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape == (2,):
        arr = np.tile(arr, (3, 1))
    if arr.shape != (3, 2):
        raise ValueError("translation range must be (lo, hi) or three (lo, hi) pairs")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ValueError("translation range lower bound exceeds upper bound")
    return tuple((float(a), float(b)) for a, b in arr)


@dataclass(frozen=True)
class PoseSamplerConfig:
    """Random camera motion used to create the second view.

    ``axis`` pins the rotation axis; ``None`` draws it uniformly on the sphere.
    """

    angle_range_deg: tuple[float, float] = (10.0, 45.0)
    translation_range: tuple = (-0.5, 0.5)
    overlap_range: tuple[float, float] = (0.1, 0.7)
    max_attempts: int = 200
    overlap_radius: float = 0.05
    axis: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        amin, amax = (float(a) for a in self.angle_range_deg)
        if amin < 0 or amin > amax:
            raise ValueError(f"invalid angle range {self.angle_range_deg}")
        lo, hi = (float(a) for a in self.overlap_range)
        if not (0 <= lo < hi <= 1):
            raise ValueError(f"overlap range must satisfy 0 <= lo < hi <= 1, got {self.overlap_range}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.overlap_radius <= 0:
            raise ValueError("overlap_radius must be positive")
        object.__setattr__(self, "angle_range_deg", (amin, amax))
        object.__setattr__(self, "overlap_range", (lo, hi))
        object.__setattr__(self, "translation_range", _as_ranges(self.translation_range))
        if self.axis is not None:
            object.__setattr__(self, "axis", tuple(float(a) for a in self.axis))

    def to_dict(self) -> dict:
        return {
            "angle_range_deg": list(self.angle_range_deg),
            "translation_range": [list(r) for r in self.translation_range],
            "overlap_range": list(self.overlap_range),
            "max_attempts": self.max_attempts,
            "overlap_radius": self.overlap_radius,
            "axis": None if self.axis is None else list(self.axis),
        }


def view_overlap(source: DepthMap, pose: Pose, radius: float) -> float:
    """Overlap between a depth map's cloud and what survives re-projection under ``pose``."""
    cloud = unproject(source)
    seen = unproject(reproject(transform(cloud, pose), source.intrinsics))
    if len(seen) == 0:
        return 0.0
    return overlap_ratio(cloud, seen, pose, radius)


def sample_pose(config: PoseSamplerConfig, seed, source: DepthMap) -> Pose:
    """Draw random poses until the resulting view overlap falls in ``config.overlap_range``."""
    rng = np.random.default_rng(seed)
    if not source.valid.any():
        raise DegenerateInputError("cannot sample a pose for an empty depth map")
    lo, hi = config.overlap_range
    amin, amax = np.deg2rad(config.angle_range_deg)
    tr = np.asarray(config.translation_range)
    pose, overlap = None, None
    for _ in range(config.max_attempts):
        if config.axis is None:
            axis = rng.standard_normal(3)
            while np.linalg.norm(axis) < 1e-12:
                axis = rng.standard_normal(3)
        else:
            axis = np.asarray(config.axis)
        angle = rng.uniform(amin, amax)
        t = rng.uniform(tr[:, 0], tr[:, 1])
        pose = Pose.from_axis_angle(axis, angle, t)
        overlap = view_overlap(source, pose, config.overlap_radius)
        if lo <= overlap <= hi:
            return pose
    raise SamplingExhaustedError(
        f"no pose with overlap in [{lo}, {hi}] after {config.max_attempts} attempts (last {overlap:.3f})",
        pose=pose,
        overlap=overlap,
    )
