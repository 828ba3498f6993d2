import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from objrecon.core import Frame, Intrinsics, Pose

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# invariant suites run at least this many hypothesis cases
INVARIANT_CASES = 1000


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_intrinsics(w=32, h=24, f=30.0):
    return Intrinsics(f, f, w / 2 - 0.5, h / 2 - 0.5, w, h)


def flat_frame(depth=1.0, iid=1, w=32, h=24, pose=None, index=0, mask=None):
    K = small_intrinsics(w, h)
    d = np.full((h, w), depth, dtype=np.float32)
    m = np.full((h, w), iid, dtype=np.int32) if mask is None else mask.astype(np.int32)
    c = np.full((h, w, 3), 0.5, dtype=np.float32)
    return Frame(index, c, d, m, pose or Pose.identity(), K)


def primitive_sdf(prim, pts):
    """Signed distance to a sphere / box / cylinder primitive (negative inside)."""
    local = (pts - prim.pose.translation) @ prim.pose.rotation
    if prim.kind == "sphere":
        return np.linalg.norm(local, axis=1) - prim.size[0]
    if prim.kind == "box":
        q = np.abs(local) - np.asarray(prim.size) / 2
        return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    r, h = prim.size
    q = np.column_stack([np.hypot(local[:, 0], local[:, 1]) - r, np.abs(local[:, 2]) - h / 2])
    return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)


def analytic_model(prims, box, sharpness=400.0, albedo=(0.8, 0.3, 0.2), dtype=np.float32):
    """ObjectModel whose occupancy is logistic(-sharpness * sdf) on the finest grid level.

    Stands in for a well-fitted model: the geometry MLP passes the finest-level
    feature straight to the logistic output; colour is constant.
    """
    from objrecon.field import GridConfig, ObjectModel, vertex_coords
    from objrecon.core import from_box_coords

    m = ObjectModel.create(box, np.random.default_rng(0), GridConfig(), dtype=dtype)
    L, n = m.config.L, m.config.sizes[-1]
    world = from_box_coords(vertex_coords(n), box)
    sdf = np.min([primitive_sdf(p, world) for p in prims], axis=0)
    m.geo_grid.levels[-1][:] = np.clip(-sharpness * sdf, -30, 30)
    W0 = m.geo_mlp.weights[0]
    W0[:] = 0
    W0[L - 1, 0], W0[L - 1, 1] = 1.0, -1.0
    m.geo_mlp.biases[0][:] = 0
    m.geo_mlp.weights[1][:] = 0
    m.geo_mlp.weights[1][0, 0], m.geo_mlp.weights[1][1, 0] = 1.0, -1.0
    m.geo_mlp.biases[1][:] = 0
    for W in m.col_mlp.weights:
        W[:] = 0
    for b in m.col_mlp.biases[:-1]:
        b[:] = 0
    a = np.asarray(albedo, dtype=np.float64)
    m.col_mlp.biases[-1][:] = np.log(a / (1 - a))
    return m


def surface_cloud(prims, n=20000, seed=0):
    """Area-weighted surface samples of a (possibly composite) object with outward normals."""
    from objrecon.core import PointCloud
    from objrecon.synthdata import ground_truth_mesh

    rng = np.random.default_rng(seed)
    pts, nrm = [], []
    for p in prims:
        mesh = ground_truth_mesh(p, 0.004)
        tri = mesh.vertices[mesh.triangles]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        k = int(round(n * area.sum() / sum(ground_truth_mesh(q, 0.004).area() for q in prims)))
        f = rng.choice(len(tri), size=k, p=area / area.sum())
        a, b = rng.random((2, k))
        swap = a + b > 1
        a[swap], b[swap] = 1 - a[swap], 1 - b[swap]
        t = tri[f]
        pts.append(t[:, 0] + a[:, None] * (t[:, 1] - t[:, 0]) + b[:, None] * (t[:, 2] - t[:, 0]))
        nrm.append(cross[f] / np.linalg.norm(cross[f], axis=1, keepdims=True))
    pts, nrm = np.concatenate(pts), np.concatenate(nrm)
    if len(prims) > 1:
        inside = np.min([primitive_sdf(p, pts) for p in prims], axis=0) < -1e-4
        pts, nrm = pts[~inside], nrm[~inside]
    return PointCloud(pts, nrm)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
