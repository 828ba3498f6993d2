"""Deterministic synthetic RGB-D sequences over analytic primitives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Frame, Intrinsics, Pose, look_at, pixel_rays
from .meshmetrics import TriangleMesh

LIGHT_DIR = np.array([0.3, -0.4, 0.866])  # direction towards the light
AMBIENT = 0.2


@dataclass(frozen=True, eq=False)
class Primitive:
    """``size``: sphere (r,), box (sx, sy, sz) full edge lengths, cylinder (r, height) along local z."""

    kind: str
    size: tuple
    pose: Pose = field(default_factory=Pose.identity)
    albedo: tuple = (0.8, 0.8, 0.8)
    instance_id: int = 1
    category: int = 0

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if len(self.size) != expected or any(s <= 0 for s in self.size):
            raise ValueError(f"{self.kind} needs {expected} positive size parameters")

    @classmethod
    def at(cls, kind: str, size, center, **kw) -> "Primitive":
        return cls(kind, tuple(size), Pose(np.eye(3), center), **kw)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest positive hit parameter t (inf on miss) and world normals."""
        o = (origins - self.pose.translation) @ self.pose.rotation
        d = dirs @ self.pose.rotation
        t, n = getattr(self, f"_hit_{self.kind}")(o, d)
        return t, n @ self.pose.rotation.T

    def _hit_sphere(self, o, d):
        r = self.size[0]
        a = np.einsum("ij,ij->i", d, d)
        b = np.einsum("ij,ij->i", o, d)
        c = np.einsum("ij,ij->i", o, o) - r * r
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, p / r

    def _hit_box(self, o, d):
        half = 0.5 * np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (-half - o) * inv
            t1 = (half - o) * inv
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        tn = np.where(np.isnan(tn), -np.inf, tn)
        tf = np.where(np.isnan(tf), np.inf, tf)
        t_enter = tn.max(axis=1)
        t_exit = tf.min(axis=1)
        hit = (t_exit >= t_enter) & (t_exit > 1e-9)
        t = np.where(hit, np.where(t_enter > 1e-9, t_enter, t_exit), np.inf)
        axis = np.where(t_enter > 1e-9, tn.argmax(axis=1), tf.argmin(axis=1))
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = np.zeros_like(o)
        rows = np.arange(len(o))
        n[rows, axis] = np.sign(p[rows, axis])
        return t, n

    def _hit_cylinder(self, o, d):
        r, h = self.size
        hz = 0.5 * h
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = [(-b - sq) / a, (-b + sq) / a]
            tc = [(-hz - o[:, 2]) / d[:, 2], (hz - o[:, 2]) / d[:, 2]]
        best = np.full(len(o), np.inf)
        normal = np.zeros_like(o)
        for t in ts:
            z = o[:, 2] + t * d[:, 2]
            ok = (disc >= 0) & (a > 1e-15) & (t > 1e-9) & (np.abs(z) <= hz) & (t < best)
            best = np.where(ok, t, best)
            p = o + np.where(ok, t, 0.0)[:, None] * d
            normal[ok] = np.c_[p[ok, 0] / r, p[ok, 1] / r, np.zeros(ok.sum())]
        for t, s in zip(tc, (-1.0, 1.0)):
            p = o + np.nan_to_num(t, posinf=0, neginf=0)[:, None] * d
            ok = np.isfinite(t) & (t > 1e-9) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= r * r) & (t < best)
            best = np.where(ok, t, best)
            normal[ok] = [0.0, 0.0, s]
        return best, normal


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path description.

    ``orbit``: circle of ``radius`` around ``center`` at ``height``, covering ``arc``
    radians from ``start_angle``; with ``height_wave = k`` the height follows
    ``height * cos(k * angle)`` so the camera passes above and below the target.
    ``hemisphere``: Fibonacci directions in the half-space around ``axis``.
    ``linear``: straight path from ``center`` to ``end``.
    """

    kind: str = "orbit"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.6
    n_frames: int = 100
    target: Optional[tuple] = None
    height: float = 0.0
    arc: float = 2 * np.pi
    start_angle: float = 0.0
    axis: tuple = (1.0, 0.0, 0.0)
    end: tuple = (0.0, 0.0, 0.0)
    jitter: float = 0.0
    seed: int = 0
    height_wave: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.kind in ("orbit", "hemisphere") and self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.kind not in ("orbit", "hemisphere", "linear"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")


def generate_trajectory(spec: TrajectorySpec) -> list[Pose]:
    rng = np.random.default_rng(spec.seed)
    c = np.asarray(spec.center, dtype=np.float64)
    target = c if spec.target is None else np.asarray(spec.target, dtype=np.float64)
    n = spec.n_frames
    if spec.kind == "orbit":
        closed = np.isclose(spec.arc, 2 * np.pi)
        step = spec.arc / n if closed else spec.arc / max(n - 1, 1)
        ang = spec.start_angle + step * np.arange(n)
        h = spec.height * np.cos(spec.height_wave * (ang - spec.start_angle))
        eyes = c + np.stack([spec.radius * np.cos(ang), spec.radius * np.sin(ang), h], axis=1)
    elif spec.kind == "hemisphere":
        axis = np.asarray(spec.axis, dtype=np.float64)
        axis /= np.linalg.norm(axis)
        # Fibonacci lattice on the cap {v : v . axis >= 0.05}
        k = np.arange(n) + 0.5
        cos_t = 1.0 - k / n * 0.95
        phi = np.pi * (3.0 - np.sqrt(5.0)) * k
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        local = np.stack([cos_t, sin_t * np.cos(phi), sin_t * np.sin(phi)], axis=1)
        u = np.cross(axis, [0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.cross(axis, [1.0, 0.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        dirs = local @ np.stack([axis, u, v])
        eyes = c + spec.radius * dirs
    else:
        t = np.linspace(0.0, 1.0, n)[:, None]
        eyes = c + t * (np.asarray(spec.end, dtype=np.float64) - c)
    if spec.jitter > 0:
        eyes = eyes + spec.jitter * rng.standard_normal(eyes.shape)
    return [look_at(e, target) for e in eyes]


def default_intrinsics(width: int = 640, height: int = 480, fov_deg: float = 60.0) -> Intrinsics:
    f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return Intrinsics(f, f, width / 2 - 0.5, height / 2 - 0.5, width, height, 1000.0)


def raycast_frame(scene: Sequence[Primitive], pose: Pose, intrinsics: Intrinsics, index: int = 0,
                  depth_noise: float = 0.0, rng: Optional[np.random.Generator] = None,
                  quantize: bool = True) -> Frame:
    """Render depth, instance masks and Lambertian colour by exact ray casting."""
    h, w = intrinsics.height, intrinsics.width
    vs, us = np.mgrid[0:h, 0:w]
    cam = pixel_rays(intrinsics, us.ravel(), vs.ravel())
    dirs = cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    depth = np.full(h * w, np.inf)
    ids = np.zeros(h * w, dtype=np.int32)
    color = np.zeros((h * w, 3))
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    for prim in scene:
        t, n = prim.intersect(origins, dirs)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids = np.where(closer, prim.instance_id, ids)
        shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(n[closer] @ light, 0.0)
        color[closer] = shade[:, None] * np.asarray(prim.albedo)[None]
    hit = np.isfinite(depth)
    depth = np.where(hit, depth, 0.0)
    if depth_noise > 0:
        rng = rng or np.random.default_rng(index)
        depth = np.where(hit, np.maximum(depth + depth_noise * rng.standard_normal(depth.shape), 0.0), 0.0)
    color = np.clip(color, 0.0, 1.0)
    if quantize:
        color = np.rint(color * 255.0) / 255.0
    categories = {p.instance_id: p.category for p in scene}
    return Frame(index, color.reshape(h, w, 3), depth.reshape(h, w), ids.reshape(h, w), pose, intrinsics,
                 categories)


def render_sequence(scene: Sequence[Primitive], poses: Sequence[Pose], intrinsics: Intrinsics,
                    depth_noise: float = 0.0, seed: int = 0, start_index: int = 0) -> list[Frame]:
    rng = np.random.default_rng(seed)
    return [raycast_frame(scene, p, intrinsics, start_index + i, depth_noise, rng) for i, p in enumerate(poses)]


def _grid_faces(nu: int, nv: int, offset: int = 0, wrap_u: bool = False) -> np.ndarray:
    faces = []
    cols = nu if wrap_u else nu - 1
    for i in range(cols):
        i1 = (i + 1) % nu
        for j in range(nv - 1):
            a, b, c, d = i * nv + j, i1 * nv + j, i1 * nv + j + 1, i * nv + j + 1
            faces.append((a, b, c))
            faces.append((a, c, d))
    return np.asarray(faces, dtype=np.int64) + offset


def _sphere_mesh(r: float, res: float) -> TriangleMesh:
    # cube-sphere: each cube face subdivided, then projected to the sphere
    n = max(int(np.ceil(np.pi * r / 2 / res)), 2) + 1
    t = np.linspace(-1.0, 1.0, n)
    verts, faces = [], []
    a, b = np.meshgrid(t, t, indexing="ij")
    for axis in range(3):
        for s in (-1.0, 1.0):
            p = np.empty((n, n, 3))
            p[..., axis] = s
            p[..., (axis + 1) % 3] = a
            p[..., (axis + 2) % 3] = b
            p = np.tan(p * np.pi / 4)  # equal-angle spacing
            p[..., axis] = s
            f = _grid_faces(n, n, sum(len(v) for v in verts))
            if s < 0:
                f = f[:, ::-1]
            verts.append(p.reshape(-1, 3))
            faces.append(f)
    v = np.concatenate(verts)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * r
    from .meshmetrics import _clean
    return _clean(v, np.concatenate(faces))


def _box_mesh(size, res: float) -> TriangleMesh:
    half = 0.5 * np.asarray(size, dtype=np.float64)
    verts, faces = [], []
    for axis in range(3):
        u, w = (axis + 1) % 3, (axis + 2) % 3
        nu = max(int(np.ceil(2 * half[u] / res)), 1) + 1
        nw = max(int(np.ceil(2 * half[w] / res)), 1) + 1
        a, b = np.meshgrid(np.linspace(-half[u], half[u], nu), np.linspace(-half[w], half[w], nw), indexing="ij")
        for s in (-1.0, 1.0):
            p = np.empty((nu, nw, 3))
            p[..., axis] = s * half[axis]
            p[..., u] = a
            p[..., w] = b
            f = _grid_faces(nu, nw, sum(len(v) for v in verts))
            if s < 0:
                f = f[:, ::-1]
            verts.append(p.reshape(-1, 3))
            faces.append(f)
    from .meshmetrics import _clean
    return _clean(np.concatenate(verts), np.concatenate(faces))


def _cylinder_mesh(r: float, height: float, res: float) -> TriangleMesh:
    n_ang = max(int(np.ceil(2 * np.pi * r / res)), 8)
    n_h = max(int(np.ceil(height / res)), 1) + 1
    n_rad = max(int(np.ceil(r / res)), 1)
    ang = 2 * np.pi * np.arange(n_ang) / n_ang
    z = np.linspace(-height / 2, height / 2, n_h)
    side = np.stack(np.broadcast_arrays(r * np.cos(ang)[:, None], r * np.sin(ang)[:, None], z[None, :]), axis=-1)
    verts = [side.reshape(-1, 3)]
    faces = [_grid_faces(n_ang, n_h, 0, wrap_u=True)]
    for s in (-1.0, 1.0):
        radii = r * np.arange(1, n_rad + 1) / n_rad
        ring = np.stack(np.broadcast_arrays(np.cos(ang)[:, None] * radii[None], np.sin(ang)[:, None] * radii[None],
                                            np.full((n_ang, n_rad), s * height / 2)), axis=-1)
        off = sum(len(v) for v in verts)
        cap = np.concatenate([[[0.0, 0.0, s * height / 2]], ring.reshape(-1, 3)])
        f = [(off, off + 1 + i * n_rad, off + 1 + ((i + 1) % n_ang) * n_rad) for i in range(n_ang)]
        f += [tuple(x + off + 1) for x in _grid_faces(n_ang, n_rad, 0, wrap_u=True)]
        f = np.asarray(f, dtype=np.int64)
        if s < 0:
            f = f[:, ::-1]
        verts.append(cap)
        faces.append(f)
    from .meshmetrics import _clean
    return _clean(np.concatenate(verts), np.concatenate(faces))


def ground_truth_mesh(prim: Primitive, resolution: float = 0.002) -> TriangleMesh:
    """Analytic triangulation of ``prim`` in world coordinates, edges about ``resolution`` long."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if prim.kind == "sphere":
        mesh = _sphere_mesh(prim.size[0], resolution)
    elif prim.kind == "box":
        mesh = _box_mesh(prim.size, resolution)
    else:
        mesh = _cylinder_mesh(prim.size[0], prim.size[1], resolution)
    return TriangleMesh(prim.pose.apply(mesh.vertices), mesh.triangles)


@dataclass
class SceneSpec:
    """Everything ``gen`` needs: primitives, camera path, intrinsics and sensor noise."""

    primitives: list
    trajectory: TrajectorySpec
    intrinsics: Intrinsics = field(default_factory=default_intrinsics)
    depth_noise: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        """Parse a mapping such as::

            primitives:
              - {kind: sphere, size: [0.05], center: [0.12, 0, 0], albedo: [0.9, 0.2, 0.2],
                 instance_id: 1, category: 3, rotation_deg: [0, 0, 30]}
            trajectory: {kind: orbit, radius: 0.6, n_frames: 100, height: 0.25}
            intrinsics: {width: 640, height: 480, fov_deg: 60}
            depth_noise: 0.0
        """
        from scipy.spatial.transform import Rotation

        if not isinstance(data, dict):
            raise ValueError("scene spec must be a mapping")
        unknown = set(data) - {"primitives", "trajectory", "intrinsics", "depth_noise", "seed"}
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        prims = []
        for i, p in enumerate(data.get("primitives") or []):
            p = dict(p)
            try:
                rot = Rotation.from_euler("xyz", p.pop("rotation_deg", (0, 0, 0)), degrees=True).as_matrix()
                pose = Pose(rot, p.pop("center", (0, 0, 0)))
                prims.append(Primitive(p.pop("kind"), tuple(p.pop("size")), pose, **{
                    k: (tuple(v) if k == "albedo" else v) for k, v in p.items()}))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"primitive {i}: {exc}") from exc
        if not prims:
            raise ValueError("scene has no primitives")
        ids = [p.instance_id for p in prims]
        if any(i <= 0 for i in ids):
            raise ValueError("instance ids must be positive")
        traj = data.get("trajectory") or {}
        try:
            traj = TrajectorySpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in traj.items()})
        except TypeError as exc:
            raise ValueError(f"trajectory: {exc}") from exc
        K = data.get("intrinsics") or {}
        try:
            K = default_intrinsics(**K)
        except TypeError as exc:
            raise ValueError(f"intrinsics: {exc}") from exc
        return cls(prims, traj, K, float(data.get("depth_noise", 0.0)), int(data.get("seed", 0)))

    def render(self) -> list[Frame]:
        return render_sequence(self.primitives, generate_trajectory(self.trajectory), self.intrinsics,
                               self.depth_noise, self.seed)

    def ground_truth(self, resolution: float = 0.002) -> dict:
        """Instance id -> ground-truth mesh (primitives sharing an id are concatenated)."""
        out = {}
        for p in self.primitives:
            m = ground_truth_mesh(p, resolution)
            if p.instance_id in out:
                prev = out[p.instance_id]
                m = TriangleMesh(np.concatenate([prev.vertices, m.vertices]),
                                 np.concatenate([prev.triangles, m.triangles + len(prev.vertices)]))
            out[p.instance_id] = m
        return out
