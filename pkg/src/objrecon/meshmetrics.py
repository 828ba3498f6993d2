"""Mesh extraction, visibility culling, accuracy/completion metrics and PLY I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import Frame, project


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.vertices)

    def area(self) -> float:
        v = self.vertices[self.triangles]
        return 0.5 * float(np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    def boundary_edges(self) -> int:
        """Edges used by exactly one triangle."""
        if len(self.triangles) == 0:
            return 0
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts == 1))

    def select_vertices(self, keep: np.ndarray) -> "TriangleMesh":
        """Drop vertices not in ``keep`` and every triangle touching them."""
        keep = np.asarray(keep, dtype=bool)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        tri = self.triangles[np.all(keep[self.triangles], axis=1)]
        colors = None if self.colors is None else self.colors[keep]
        return TriangleMesh(self.vertices[keep], remap[tri], colors)


def _clean(vertices: np.ndarray, triangles: np.ndarray, colors=None, decimals: int = 9) -> TriangleMesh:
    """Weld coincident vertices and drop zero-area triangles."""
    if len(vertices) == 0:
        return TriangleMesh.empty()
    key = np.round(vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    tri = inverse[triangles]
    tri = tri[(tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])]
    v = vertices[first]
    p = v[tri]
    area2 = np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    tri = tri[area2 > 0]
    used = np.zeros(len(v), dtype=bool)
    used[tri.ravel()] = True
    mesh = TriangleMesh(v, tri, None if colors is None else colors[first])
    return mesh.select_vertices(used)


def extract_mesh_from_field(occupancy_fn, lo: np.ndarray, hi: np.ndarray, resolution: float,
                            level: float = 0.5, color_fn=None, pad: int = 1,
                            chunk: int = 1 << 18, fill_cavities: bool = True) -> TriangleMesh:
    """Marching cubes on ``occupancy_fn`` (world points -> values) over the box [lo, hi].

    ``pad`` extra lattice layers outside the box are forced below ``level`` so
    surfaces cut by the box boundary are closed.  With ``fill_cavities`` lattice
    regions below ``level`` that are sealed off from the outside (face
    connectivity) are filled: no camera ray can reach them, so their values are
    unconstrained by the observations.
    """
    from skimage.measure import marching_cubes

    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    counts = np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 2)
    axes = [lo[i] + resolution * np.arange(-pad, counts[i] + pad) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = grid.shape[:3]
    pts = grid.reshape(-1, 3)
    vals = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        vals[s:s + chunk] = occupancy_fn(pts[s:s + chunk])
    vals = vals.reshape(shape)
    if pad:
        outside = np.zeros(shape, dtype=bool)
        outside[:pad] = outside[-pad:] = True
        outside[:, :pad] = outside[:, -pad:] = True
        outside[:, :, :pad] = outside[:, :, -pad:] = True
        vals[outside] = min(level - 0.5, float(vals.min()) - 1.0)
    if fill_cavities:
        from scipy.ndimage import label

        empty = vals < level
        lab, _ = label(empty)
        exterior = np.unique(np.concatenate([lab[[0, -1]].ravel(), lab[:, [0, -1]].ravel(),
                                             lab[:, :, [0, -1]].ravel()]))
        cavity = empty & ~np.isin(lab, exterior)
        vals[cavity] = max(level + 0.5, float(vals.max()))
    if not (vals.min() < level < vals.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = marching_cubes(vals, level=level, spacing=(resolution,) * 3, allow_degenerate=False)
    verts = verts + np.array([a[0] for a in axes])
    colors = None if color_fn is None else np.clip(color_fn(verts), 0.0, 1.0)
    return _clean(verts, faces, colors)


def extract_mesh(model, resolution: float = 0.005, with_color: bool = True,
                 fill_cavities: bool = True) -> TriangleMesh:
    """Iso-surface at occupancy 0.5 of an ObjectModel, in world coordinates."""
    from .core import to_box_coords
    from .field import decode_color, decode_occupancy

    def occ(p):
        x = to_box_coords(p, model.box)
        out = decode_occupancy(model, np.clip(x, 0.0, 1.0)).astype(np.float64)
        return np.where(np.all((x >= 0) & (x <= 1), axis=1), out, 0.0)

    def col(p):
        return decode_color(model, np.clip(to_box_coords(p, model.box), 0.0, 1.0)).astype(np.float64)

    lo, hi = model.box.world_bounds()
    return extract_mesh_from_field(occ, lo, hi, resolution, color_fn=col if with_color else None,
                                   fill_cavities=fill_cavities)


def cull_unseen(mesh: TriangleMesh, frames: Iterable[Frame], tau: float = 0.02) -> TriangleMesh:
    """Keep vertices that some frame sees: in-image with rendered depth <= measured depth + tau."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for f in frames:
        uv, z = project(mesh.vertices, f.pose, f.intrinsics)
        h, w = f.depth.shape
        with np.errstate(invalid="ignore"):
            u = np.rint(uv[:, 0])
            v = np.rint(uv[:, 1])
            ok = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = np.nonzero(ok & ~seen)[0]
        d_in = f.depth[v[idx].astype(int), u[idx].astype(int)]
        seen[idx[(d_in > 0) & (z[idx] <= d_in + tau)]] = True
    return mesh.select_vertices(seen)


def _points(x) -> np.ndarray:
    p = x.vertices if isinstance(x, TriangleMesh) else np.asarray(x, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("metrics need non-empty vertex sets")
    return p


def nn_distances(src, dst) -> np.ndarray:
    """Exact nearest-neighbour distance from each src vertex to the dst vertex set."""
    d, _ = cKDTree(_points(dst)).query(_points(src), k=1)
    return d


def accuracy(rec, gt) -> float:
    """Mean distance (cm) from reconstructed vertices to the nearest ground-truth vertex."""
    return 100.0 * float(nn_distances(rec, gt).mean())


def completion(rec, gt) -> float:
    """Mean distance (cm) from ground-truth vertices to the nearest reconstructed vertex."""
    return 100.0 * float(nn_distances(gt, rec).mean())


def completion_ratio(rec, gt, threshold: float = 0.01) -> float:
    """Percentage of ground-truth vertices within ``threshold`` metres of the reconstruction."""
    return 100.0 * float(np.mean(nn_distances(gt, rec) < threshold))


@dataclass
class MetricReport:
    accuracy_cm: float
    completion_cm: float
    completion_ratio: dict

    def lines(self, name: str = "object") -> list[str]:
        out = [f"{name} accuracy_cm {self.accuracy_cm:.4f}", f"{name} completion_cm {self.completion_cm:.4f}"]
        for t, v in sorted(self.completion_ratio.items(), reverse=True):
            out.append(f"{name} completion_ratio@{t:g} {v:.2f}")
        return out


def evaluate(rec, gt, thresholds: Sequence[float] = (0.01, 0.005, 0.05)) -> MetricReport:
    d_rg = nn_distances(rec, gt)
    d_gr = nn_distances(gt, rec)
    return MetricReport(100.0 * float(d_rg.mean()), 100.0 * float(d_gr.mean()),
                        {float(t): 100.0 * float(np.mean(d_gr < t)) for t in thresholds})


def write_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    path = Path(path)
    has_color = mesh.colors is not None
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(mesh.vertices)}", "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    rgb = None if not has_color else np.clip(np.rint(mesh.colors * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_color else [])
            rec = np.empty(len(mesh.vertices), dtype=fields)
            rec["xyz"] = mesh.vertices
            if has_color:
                rec["rgb"] = rgb
            fh.write(rec.tobytes())
            frec = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            frec["n"] = 3
            frec["idx"] = mesh.triangles
            fh.write(frec.tobytes())
        else:
            lines = []
            for i, v in enumerate(mesh.vertices):
                s = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
                if has_color:
                    s += " {} {} {}".format(*rgb[i])
                lines.append(s)
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> TriangleMesh:
    """Reader for the vertex/face PLY layouts written by ``write_ply``."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    fmt = header[1].split()[1]
    n_v = n_f = 0
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props.append(parts[2])
    has_color = "red" in props
    body = data[end:]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        vrows = np.array([r.split() for r in rows[:n_v]], dtype=np.float64).reshape(n_v, -1)
        frows = np.array([r.split()[1:4] for r in rows[n_v:n_v + n_f]], dtype=np.int64).reshape(n_f, 3)
        colors = vrows[:, 3:6] / 255.0 if has_color else None
        return TriangleMesh(vrows[:, :3], frows, colors)
    vdt = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_color else [])
    vrec = np.frombuffer(body, dtype=vdt, count=n_v)
    off = vrec.nbytes
    frec = np.frombuffer(body[off:], dtype=[("n", "u1"), ("idx", "<i4", 3)], count=n_f)
    colors = vrec["rgb"].astype(np.float64) / 255.0 if has_color else None
    return TriangleMesh(vrec["xyz"].astype(np.float64), frec["idx"].astype(np.int64), colors)

