"""Geometry primitives shared by every other module.

Conventions: pinhole cameras with x right, y down, z forward; poses are
camera-to-world; pixel ``(u, v)`` means column ``u``, row ``v`` with integer
pixel centres; depth ``0`` marks an invalid measurement.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        # plain Python scalars keep text serialisation and equality simple
        for name in ("fx", "fy", "cx", "cy", "depth_scale"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        return self.translation


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    color: np.ndarray
    depth: np.ndarray
    masks: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    categories: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.depth.shape
        if self.color.shape[:2] != (h, w) or self.masks.shape != (h, w):
            raise ValueError("color, depth and masks must share dimensions")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.masks)
        return [int(i) for i in ids if i != 0]


@dataclass(frozen=True, eq=False)
class BoxTransform:
    """Maps the canonical unit cube onto a world-space oriented box.

    A canonical point ``x`` goes to ``R @ ((x - 0.5) * extent) + center``.
    """

    extent: np.ndarray
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        s = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "extent", s)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous map from unit-cube coordinates to world."""
        A = self.rotation * self.extent[None, :]
        M = np.eye(4)
        M[:3, :3] = A
        M[:3, 3] = self.center - A @ np.full(3, 0.5)
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "BoxTransform":
        A = M[:3, :3]
        extent = np.linalg.norm(A, axis=0)
        R = A / extent[None, :]
        center = M[:3, 3] + A @ np.full(3, 0.5)
        return cls(extent, center, R)

    def transformed(self, pose: Pose) -> "BoxTransform":
        """Box moved rigidly by ``pose`` (object frame to world)."""
        return BoxTransform(self.extent, pose.apply(self.center), pose.rotation @ self.rotation)

    def corners(self) -> np.ndarray:
        c = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
        return from_box_coords(c, self)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        x = to_box_coords(points, self)
        return np.all((x >= -tol) & (x <= 1.0 + tol), axis=-1)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(axis=0), c.max(axis=0)


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def transformed(self, pose: Pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), normals, self.colors)

    def concat(self, other: "PointCloud") -> "PointCloud":
        # an attribute survives only if every non-empty side carries it
        def cat(name):
            parts = [getattr(c, name) for c in (self, other) if len(c)]
            if not parts or any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return PointCloud(np.concatenate([self.points, other.points]), cat("normals"), cat("colors"))


def pixel_rays(intrinsics: Intrinsics, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions with unit z component."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    return np.stack([(us - intrinsics.cx) / intrinsics.fx, (vs - intrinsics.cy) / intrinsics.fy, np.ones_like(us)], axis=-1)


def backproject(frame: Frame, instance_id: int) -> PointCloud:
    if not np.any(frame.masks == instance_id):
        raise KeyError(f"instance {instance_id} absent from frame {frame.index}")
    sel = (frame.masks == instance_id) & (frame.depth > 0)
    vs, us = np.nonzero(sel)
    d = frame.depth[vs, us].astype(np.float64)
    cam = pixel_rays(frame.intrinsics, us, vs) * d[:, None]
    colors = frame.color[vs, us].astype(np.float64)
    return PointCloud(frame.pose.apply(cam), colors=colors)


def project(points: np.ndarray, pose: Pose, intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World points to continuous pixel coordinates ``(u, v)`` and camera depth."""
    cam = pose.inverse().apply(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1), z


def to_box_coords(points: np.ndarray, S: BoxTransform) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return ((p - S.center) @ S.rotation) / S.extent + 0.5


def from_box_coords(coords: np.ndarray, S: BoxTransform) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    return ((x - 0.5) * S.extent) @ S.rotation.T + S.center


def update_bounding_box(cloud: PointCloud, margin_fraction: float = 0.1,
                        min_extent: float = 0.02) -> BoxTransform:
    """Axis-aligned world box around ``cloud``, enlarged per axis by the margin."""
    if len(cloud) == 0:
        raise ValueError("cannot bound an empty point cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = np.maximum((hi - lo) * (1.0 + margin_fraction), min_extent)
    return BoxTransform(extent, 0.5 * (lo + hi))


def filter_depth_outliers(frame: Frame, instance_id: int, alpha: float = 1.5,
                          n_bins: int = 15, depth_range: tuple[float, float] = (0.0, 6.0),
                          min_bin_fraction: float = 0.05) -> Frame:
    """Zero masked depths far from the mask's mean or in sparsely populated depth bins."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sel = (frame.masks == instance_id) & (frame.depth > 0)
    if not np.any(sel):
        return frame
    depth = frame.depth.copy()
    vals = depth[sel].astype(np.float64)
    m, s = vals.mean(), vals.std()
    # tolerance absorbs the rounding of the mean when every depth is identical
    eps = 1e-9 * max(1.0, abs(m))
    keep = (vals >= m - alpha * s - eps) & (vals <= m + alpha * s + eps)

    edges = np.linspace(depth_range[0], depth_range[1], n_bins + 1)
    bins = np.clip(np.digitize(vals, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(bins[keep], minlength=n_bins)
    total = max(int(keep.sum()), 1)
    keep &= counts[bins] >= min_bin_fraction * total

    vals = np.where(keep, vals, 0.0)
    depth[sel] = vals.astype(depth.dtype)
    return replace(frame, depth=depth)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel; output ordered by voxel key."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    def mean(a):
        out = np.stack([np.bincount(inverse, weights=a[:, i]) for i in range(3)], axis=-1)
        return out / counts[:, None]

    normals = None
    if cloud.normals is not None:
        normals = mean(cloud.normals)
        n = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(n > 0, n, 1.0)
    colors = None if cloud.colors is None else mean(cloud.colors)
    return PointCloud(mean(cloud.points), normals, colors)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose optical axis points to ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(z, up)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
