"""Analytic scenes rendered by ray casting.

Every desk-scale experiment runs on these: depth maps come from exact
ray/primitive intersection and dense reference clouds from surface sampling.
Camera poses here are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, Intrinsics, PointCloud, Pose, reproject, rotation_matrix, transform
from .tsdf import make_mask_sample, voxel_downsample


@dataclass(frozen=True)
class Rect:
    """Planar rectangle ``center + a*u + b*v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float

    def intersect(self, origin, dirs):
        c, u, v = (np.asarray(a, dtype=np.float64) for a in (self.center, self.u, self.v))
        n = np.cross(u, v)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((c - origin) @ n) / denom
        hit = origin + lam[:, None] * dirs - c
        ok = (np.abs(denom) > 1e-12) & (lam > 1e-9)
        ok &= (np.abs(hit @ u) <= self.half_u) & (np.abs(hit @ v) <= self.half_v)
        return np.where(ok, lam, np.inf)

    def sample(self, spacing):
        c, u, v = (np.asarray(a, dtype=np.float64) for a in (self.center, self.u, self.v))
        na = int(np.floor(2 * self.half_u / spacing)) + 1
        nb = int(np.floor(2 * self.half_v / spacing)) + 1
        a = np.linspace(-self.half_u, self.half_u, na)
        b = np.linspace(-self.half_v, self.half_v, nb)
        A, B = np.meshgrid(a, b, indexing="ij")
        return c + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        cc = oc @ oc - self.radius**2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        near = (-b - sq) / (2 * a)
        far = (-b + sq) / (2 * a)
        lam = np.where(near > 1e-9, near, far)
        return np.where((disc >= 0) & (lam > 1e-9), lam, np.inf)

    def sample(self, spacing):
        n = max(int(np.ceil(4 * np.pi * self.radius**2 / spacing**2)), 1)
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5**0.5) * i
        dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        return np.asarray(self.center) + self.radius * dirs


def box_faces(lo, hi):
    """Six rectangles bounding an axis-aligned box."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    eye = np.eye(3)
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            c = mid.copy()
            c[axis] += sign * half[axis]
            faces.append(Rect(tuple(c), tuple(eye[a]), tuple(eye[b]), float(half[a]), float(half[b])))
    return faces


@dataclass(frozen=True)
class Scene:
    primitives: tuple

    def render(self, intrinsics: Intrinsics, camera_pose: Pose) -> DepthMap:
        K = intrinsics
        v, u = np.mgrid[0 : K.height, 0 : K.width]
        rays = np.stack([(u.ravel() - K.cx) / K.fx, (v.ravel() - K.cy) / K.fy, np.ones(u.size)], axis=1)
        dirs = rays @ camera_pose.rotation.T
        origin = camera_pose.translation
        lam = np.full(u.size, np.inf)
        for prim in self.primitives:
            lam = np.minimum(lam, prim.intersect(origin, dirs))
        lam[~np.isfinite(lam)] = 0.0
        # rays have unit z in the camera frame, so the ray parameter is the depth
        return DepthMap(lam.reshape(K.shape), K)

    def sample_surface(self, spacing: float) -> PointCloud:
        return PointCloud(np.concatenate([p.sample(spacing) for p in self.primitives]))


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose with +z toward ``target`` and -y toward ``up``."""
    eye, target = np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64) * -1.0, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def planes_scene(front_depth=1.0, back_depth=2.0, front_half=(0.25, 0.25), front_center=(0.0, 0.0), back_half=4.0):
    front = Rect((front_center[0], front_center[1], front_depth), (1, 0, 0), (0, 1, 0), *front_half)
    back = Rect((0.0, 0.0, back_depth), (1, 0, 0), (0, 1, 0), back_half, back_half)
    return Scene((front, back))


def room_scene():
    walls = box_faces((-2.0, -1.5, -2.0), (2.0, 1.2, 3.0))
    crate = box_faces((-0.9, 0.4, 1.2), (-0.1, 1.2, 2.0))
    return Scene(tuple(walls + crate + [Sphere((0.8, 0.5, 1.8), 0.45)]))


def sphere_scene(radius=1.0):
    return Scene((Sphere((0.0, 0.0, 0.0), radius),))


def trajectory(kind: str, n: int = 8):
    """Camera-to-world poses suited to each scene kind."""
    poses = []
    for i in range(n):
        a = 2 * np.pi * i / n
        if kind == "sphere":
            elev = 0.5 * np.sin(2 * a)
            eye = 3.0 * np.array([np.cos(a) * np.cos(elev), np.sin(elev), np.sin(a) * np.cos(elev)])
            poses.append(look_at(eye, (0.0, 0.0, 0.0)))
        elif kind == "planes":
            eye = np.array([0.15 * np.cos(a), 0.1 * np.sin(a), -0.1 * np.sin(a) ** 2])
            poses.append(look_at(eye, (0.0, 0.0, 1.5)))
        elif kind == "room":
            eye = np.array([0.6 * np.cos(a) + 0.3, 0.2 * np.sin(a) - 0.2, -1.2 + 0.3 * np.sin(a)])
            target = np.array([0.8 * np.sin(a), 0.2, 2.0])
            poses.append(look_at(eye, target))
        else:
            raise ValueError(f"unknown scene kind {kind!r}")
    return poses


def make_scene(kind: str) -> Scene:
    if kind == "planes":
        return planes_scene()
    if kind == "room":
        return room_scene()
    if kind == "sphere":
        return sphere_scene()
    raise ValueError(f"unknown scene kind {kind!r}")


BENCH_INTRINSICS = Intrinsics(40.0, 40.0, 32.0, 32.0, 64, 64)


def random_two_plane_scene(rng):
    """Front rectangle floating before a wall at a random offset."""
    front_depth = rng.uniform(0.8, 1.2)
    back_depth = front_depth + rng.uniform(0.6, 1.2)
    half = rng.uniform(0.15, 0.35, size=2)
    center = rng.uniform(-0.2, 0.2, size=2)
    return planes_scene(front_depth, back_depth, tuple(half), tuple(center), back_half=0.8 * back_depth + 0.2)


def random_view(rng, max_angle_deg=8.0, max_shift=0.1) -> Pose:
    """World-to-camera transform close to the canonical view."""
    axis = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    t = rng.uniform(-max_shift, max_shift, size=3)
    return Pose(rotation_matrix(axis, angle), t)


def two_plane_benchmark(n: int, seed: int = 0, intrinsics: Intrinsics = BENCH_INTRINSICS,
                        dense_spacing: float = 0.01, sparse_voxel: float = 0.05, tau_gt: float = 0.05):
    """Penetration benchmark: ``n`` mask samples from random two-plane scenes.

    The dense cloud is a fine surface sampling standing in for fused geometry;
    the sparse one is its voxel down-sampling.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        scene = random_two_plane_scene(rng)
        dense = scene.sample_surface(dense_spacing)
        sparse = voxel_downsample(dense, sparse_voxel)
        view = random_view(rng)
        samples.append(make_mask_sample(dense, sparse, view, intrinsics, tau_gt))
    return samples


def dense_reference(scene: Scene, view: Pose, intrinsics: Intrinsics, spacing: float = 0.004) -> DepthMap:
    """Re-projection of a finely sampled scene under a world-to-camera ``view``."""
    return reproject(transform(scene.sample_surface(spacing), view), intrinsics)
