"""Library entries: construction from a fitted model, rendering helpers and persistence."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import Intrinsics, PointCloud, Pose, pixel_rays, voxel_downsample
from ..field import ObjectModel, field_forward
from ..io import FormatError, load_model, read_poses, save_model, write_poses
from ..render import composite_batch, ray_box_intersect
from .descriptor import DescriptorView, compute_view_descriptor
from .registration import compute_fpfh, estimate_normals

SOURCES = ("mesh_renders", "prior_video")


def scaled_intrinsics(K: Intrinsics, scale: int) -> Intrinsics:
    """Intrinsics of the image downsampled by an integer factor (pixel centres preserved)."""
    if scale == 1:
        return K
    return Intrinsics(K.fx / scale, K.fy / scale, (K.cx + 0.5) / scale - 0.5, (K.cy + 0.5) / scale - 0.5,
                      K.width // scale, K.height // scale, K.depth_scale)


def _camera_rays(pose: Pose, K: Intrinsics):
    v, u = np.mgrid[0:K.height, 0:K.width]
    dirs = pixel_rays(K, u.ravel(), v.ravel()) @ pose.rotation.T
    return np.broadcast_to(pose.translation, dirs.shape), dirs


def _occupancy(model: ObjectModel, pts: np.ndarray, need_color: bool, chunk: int = 1 << 17):
    from ..core import to_box_coords

    n = len(pts)
    occ = np.zeros(n)
    col = np.zeros((n, 3)) if need_color else None
    x = to_box_coords(pts, model.box)
    inside = np.nonzero(np.all((x >= 0) & (x <= 1), axis=1))[0]
    for s in range(0, len(inside), chunk):
        sel = inside[s:s + chunk]
        o, c, _ = field_forward(model, x[sel], need_color)
        occ[sel] = o
        if need_color:
            col[sel] = c
    return occ, col


@dataclass
class RenderedView:
    color: np.ndarray   # (h, w, 3), normalised by the rendered mask
    depth: np.ndarray   # (h, w), 0 where the mask is empty
    mask: np.ndarray    # (h, w) rendered mask in [0, 1]
    pose: Pose
    intrinsics: Intrinsics


def render_view(model: ObjectModel, pose: Pose, K: Intrinsics, n_samples: int = 24) -> RenderedView:
    """Composite ``n_samples`` evenly spaced samples across each pixel ray's box segment."""
    o, d = _camera_rays(pose, K)
    near, far, hit = ray_box_intersect(o, d, model.box)
    idx = np.nonzero(hit)[0]
    R = len(o)
    C, D, M = np.zeros((R, 3)), np.zeros(R), np.zeros(R)
    if len(idx):
        t = (np.arange(n_samples) + 0.5) / n_samples
        depths = near[idx, None] + (far - near)[idx, None] * t
        pts = o[idx, None, :] + depths[..., None] * d[idx, None, :]
        occ, col = _occupancy(model, pts.reshape(-1, 3), True)
        _, c, dd, m, _ = composite_batch(occ.reshape(-1, n_samples), col.reshape(-1, n_samples, 3), depths)
        C[idx], D[idx], M[idx] = c, dd, np.minimum(m, 1.0)  # rounding can exceed 1 by an ulp
    pos = M > 0
    C[pos] /= M[pos, None]
    D[pos] /= M[pos]
    h, w = K.height, K.width
    return RenderedView(C.reshape(h, w, 3), D.reshape(h, w), M.reshape(h, w), pose, K)


def render_surface_depth(model: ObjectModel, pose: Pose, K: Intrinsics, level: float = 0.5,
                         step: Optional[float] = None) -> np.ndarray:
    """Depth of the first ``level`` crossing along each pixel ray (0 where none)."""
    o, d = _camera_rays(pose, K)
    near, far, hit = ray_box_intersect(o, d, model.box)
    idx = np.nonzero(hit)[0]
    out = np.zeros(len(o))
    if len(idx) == 0:
        return out.reshape(K.height, K.width)
    if step is None:
        step = 0.5 * float(np.min(model.box.extent)) / (model.config.sizes[-1] - 1)
    n = int(np.ceil(float(np.max(far[idx] - near[idx])) / step)) + 1
    t = np.arange(n) * step
    depths = near[idx, None] + t[None, :]
    valid = depths <= far[idx, None]
    pts = o[idx, None, :] + depths[..., None] * d[idx, None, :]
    occ, _ = _occupancy(model, pts.reshape(-1, 3), False)
    occ = np.where(valid, occ.reshape(len(idx), n), 0.0)
    above = occ >= level
    has = above.any(axis=1)
    k = np.argmax(above, axis=1)
    rows = np.nonzero(has)[0]
    k = k[rows]
    z = depths[rows, k]
    prev = k > 0
    # linear interpolation between the last sample below and the first above
    o0 = occ[rows[prev], k[prev] - 1]
    o1 = occ[rows[prev], k[prev]]
    frac = (level - o0) / np.maximum(o1 - o0, 1e-12)
    z[prev] = depths[rows[prev], k[prev] - 1] + frac * step
    out[idx[rows]] = z
    return out.reshape(K.height, K.width)


@dataclass(eq=False)
class LibraryEntry:
    name: str
    model: ObjectModel            # object frame = the frame the model was fitted in
    cloud: PointCloud             # coarse cloud with normals, object frame
    fpfh: np.ndarray              # (N, 33)
    descriptor: np.ndarray        # unit vector
    poses: list                   # camera-to-object poses of the stored keyframes
    intrinsics: Intrinsics
    category: Optional[int] = None
    source: str = "prior_video"

    def __post_init__(self):
        if len(self.fpfh) != len(self.cloud):
            raise ValueError("fpfh count must equal point count")
        n = np.linalg.norm(self.descriptor)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("descriptor must have unit norm")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    @property
    def extent(self) -> np.ndarray:
        return self.model.box.extent


def cloud_from_depths(renders: Sequence[tuple[np.ndarray, Pose, Intrinsics]], voxel: float,
                      k_neighbors: int = 10) -> PointCloud:
    """Backproject depth maps, downsample and attach normals facing the observing cameras."""
    pts, eyes = [], []
    for depth, pose, K in renders:
        v, u = np.nonzero(depth > 0)
        if len(v) == 0:
            continue
        cam = pixel_rays(K, u, v) * depth[v, u][:, None]
        pts.append(pose.apply(cam))
        eyes.append(np.broadcast_to(pose.translation, (len(v), 3)))
    if not pts:
        raise ValueError("model renders empty: no surface crossing in any view")
    pts, eyes = np.concatenate(pts), np.concatenate(eyes)
    down = voxel_downsample(PointCloud(pts), voxel)
    if len(down) < k_neighbors:
        raise ValueError(f"surface too small: {len(down)} points after downsampling")
    from scipy.spatial import cKDTree

    _, nn = cKDTree(pts).query(down.points, k=1)
    down.normals = estimate_normals(down, k_neighbors, viewpoint=eyes[nn])
    return down


def build_entry(name: str, model: ObjectModel, poses: Sequence[Pose], intrinsics: Intrinsics,
                category: Optional[int] = None, source: str = "prior_video", voxel: float = 0.01,
                render_scale: int = 4, fpfh_factor: float = 2.5) -> LibraryEntry:
    """Render depth and colour from ``poses`` and derive the cloud, FPFH and descriptor."""
    if not poses:
        raise ValueError("need at least one pose")
    model = model.copy()
    model.optimizer_state = None
    model.frozen = {"geo_grid", "geo_mlp", "col_grid", "col_mlp"}
    K = scaled_intrinsics(intrinsics, render_scale)
    renders, views = [], []
    for pose in poses:
        depth = render_surface_depth(model, pose, K)
        renders.append((depth, pose, K))
        rv = render_view(model, pose, K)
        views.append(DescriptorView(rv.color, depth > 0, depth, K.fx, K.fy))
    cloud = cloud_from_depths(renders, voxel)
    fpfh, _ = compute_fpfh(cloud, fpfh_factor * voxel)
    descriptor = compute_view_descriptor(views)
    # snap to the float32 storage precision so saving and loading is lossless
    cloud = PointCloud(_f32(cloud.points), _f32(cloud.normals))
    return LibraryEntry(name, model, cloud, _f32(fpfh), _f32(descriptor), list(poses), intrinsics, category, source)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------- persistence

def _write_cloud(path, cloud: PointCloud) -> None:
    rec = np.concatenate([cloud.points, cloud.normals], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(np.array([len(cloud)], dtype="<u4").tobytes())
        fh.write(rec.tobytes())


def _read_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated")
    n = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if len(raw) != 4 + 24 * n:
        raise FormatError(f"{path}: expected {n} records")
    rec = np.frombuffer(raw[4:], dtype="<f4").reshape(n, 6).astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3:])


def save_entry(root, entry: LibraryEntry) -> Path:
    d = Path(root) / entry.name
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "model.objrecon", entry.model, with_optimizer=False)
    _write_cloud(d / "cloud.bin", entry.cloud)
    entry.fpfh.astype("<f4").T.tofile(d / "fpfh.bin")
    entry.descriptor.astype("<f4").tofile(d / "descriptor.bin")
    write_poses(d / "poses.txt", dict(enumerate(entry.poses)))
    K = entry.intrinsics
    cat = "none" if entry.category is None else str(entry.category)
    ext = " ".join(repr(float(x)) for x in entry.extent)
    (d / "meta.txt").write_text(
        f"category {cat}\nsource {entry.source}\nextent {ext}\n"
        f"intrinsics {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height} {K.depth_scale!r}\n")
    return d


def load_entry(path) -> LibraryEntry:
    d = Path(path)
    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(" ")
            meta[k] = v.strip()
    try:
        k = meta["intrinsics"].split()
        K = Intrinsics(*(float(x) for x in k[:4]), int(k[4]), int(k[5]), float(k[6]))
        category = None if meta["category"] == "none" else int(meta["category"])
        source = meta["source"]
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"{d / 'meta.txt'}: malformed ({exc})") from exc
    cloud = _read_cloud(d / "cloud.bin")
    raw = np.fromfile(d / "fpfh.bin", dtype="<f4")
    if raw.size != 33 * len(cloud):
        raise FormatError(f"{d / 'fpfh.bin'}: expected 33x{len(cloud)} values")
    fpfh = raw.reshape(33, len(cloud)).T.astype(np.float64)
    desc = np.fromfile(d / "descriptor.bin", dtype="<f4").astype(np.float64)
    poses = read_poses(d / "poses.txt")
    model = load_model(d / "model.objrecon")
    return LibraryEntry(d.name, model, cloud, fpfh, desc, [poses[i] for i in sorted(poses)], K, category, source)


@dataclass
class Library:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, entry: LibraryEntry) -> None:
        if any(e.name == entry.name for e in self.entries):
            raise ValueError(f"duplicate entry name {entry.name!r}")
        self.entries.append(entry)

    def save(self, root) -> None:
        Path(root).mkdir(parents=True, exist_ok=True)
        for e in self.entries:
            save_entry(root, e)

    @classmethod
    def load(cls, root) -> "Library":
        root = Path(root)
        if not root.is_dir():
            raise FormatError(f"{root}: library directory not found")
        entries = [load_entry(p) for p in sorted(root.iterdir()) if (p / "meta.txt").is_file()]
        return cls(entries)
