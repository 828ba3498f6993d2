"""Normals, FPFH descriptors, feature-matching RANSAC and point-to-plane ICP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ..core import PointCloud, Pose

N_BINS = 11


@dataclass
class RegistrationResult:
    transform: Pose
    fitness: float
    inlier_rmse: float
    n_iterations: int = 0


@dataclass(frozen=True)
class RansacParams:
    voxel: float = 0.01
    inlier_factor: float = 1.5
    sample_size: int = 4
    max_iterations: int = 100_000
    confidence: float = 0.999
    edge_similarity: float = 0.9
    batch: int = 512
    seed: int = 0

    @property
    def inlier_distance(self) -> float:
        return self.inlier_factor * self.voxel


@dataclass(frozen=True)
class IcpParams:
    max_distance: float = 0.03
    max_iterations: int = 50
    relative_fitness: float = 1e-6
    relative_rmse: float = 1e-6


def estimate_normals(cloud: PointCloud, k_neighbors: int = 10, viewpoint=None) -> np.ndarray:
    """PCA normals over k nearest neighbours.

    Orientation: towards ``viewpoint`` (a point or one point per sample) when
    given, otherwise away from the cloud centroid.
    """
    pts = cloud.points
    if len(pts) < k_neighbors:
        raise ValueError(f"need at least {k_neighbors} points, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k_neighbors)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if viewpoint is None:
        ref = pts - pts.mean(axis=0)
    else:
        ref = np.broadcast_to(np.asarray(viewpoint, dtype=np.float64), pts.shape) - pts
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angle features (f1, f2, f3) for point pairs; invalid pairs flagged."""
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    ok = dist > 0
    dist = np.where(ok, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / dist
    a2 = np.einsum("ij,ij->i", n2, dp) / dist
    # pick the source as the point whose normal makes the smaller angle with the line
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    src_n = np.where(swap[:, None], n2, n1)
    tgt_n = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(dp, src_n)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(src_n, v)
    f2 = np.einsum("ij,ij->i", v, tgt_n)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, tgt_n), np.einsum("ij,ij->i", src_n, tgt_n))
    return f1, f2, f3, ok


def _bin(x, lo, hi):
    return np.clip(np.floor(N_BINS * (x - lo) / (hi - lo)).astype(np.int64), 0, N_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius: float, max_nn: int = 100):
    """33-bin FPFH per point; returns (features (N, 33), isolated flags (N,))."""
    if cloud.normals is None:
        raise ValueError("FPFH needs normals")
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    tree = cKDTree(pts)
    neigh = tree.query_ball_point(pts, r=radius)
    rows, cols = [], []
    for i, nb in enumerate(neigh):
        nb = [j for j in nb if j != i]
        if len(nb) > max_nn:
            d = np.linalg.norm(pts[nb] - pts[i], axis=1)
            nb = [nb[j] for j in np.argsort(d, kind="stable")[:max_nn]]
        rows.extend([i] * len(nb))
        cols.extend(nb)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    counts = np.bincount(rows, minlength=n)
    isolated = counts == 0

    spfh = np.zeros((n, 3 * N_BINS))
    if len(rows):
        f1, f2, f3, ok = _pair_features(pts[rows], nrm[rows], pts[cols], nrm[cols])
        incr = 100.0 / np.maximum(counts[rows], 1)
        incr = np.where(ok, incr, 0.0)
        for k, b in enumerate((_bin(f1, -np.pi, np.pi), _bin(f2, -1.0, 1.0), _bin(f3, -1.0, 1.0))):
            np.add.at(spfh, (rows, k * N_BINS + b), incr)

    fpfh = np.zeros_like(spfh)
    if len(rows):
        d2 = np.sum((pts[rows] - pts[cols]) ** 2, axis=1)
        wgt = np.where(d2 > 0, 1.0 / np.where(d2 > 0, d2, 1.0), 0.0)
        contrib = spfh[cols] * wgt[:, None]
        np.add.at(fpfh, rows, contrib)
        sums = np.stack([fpfh[:, k * N_BINS:(k + 1) * N_BINS].sum(axis=1) for k in range(3)], axis=1)
        scale = np.where(sums > 0, 100.0 / np.where(sums > 0, sums, 1.0), 0.0)
        fpfh *= np.repeat(scale, N_BINS, axis=1)
    fpfh += spfh
    fpfh[isolated] = 0.0
    return fpfh, isolated


def kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation(s) and translation(s) mapping src onto dst; batched over a leading axis."""
    cs = src.mean(axis=-2, keepdims=True)
    cd = dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cd[..., 0, :] - np.einsum("...ij,...j->...i", R, cs[..., 0, :])
    return R, t


def evaluate_registration(src: np.ndarray, dst_tree: cKDTree, pose: Pose, max_distance: float):
    """Fitness (inlier fraction of src) and inlier RMSE under ``pose``."""
    d, _ = dst_tree.query(pose.apply(src), k=1, distance_upper_bound=max_distance)
    inl = np.isfinite(d)
    fitness = float(inl.mean()) if len(src) else 0.0
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else 0.0
    return fitness, rmse


def ransac_register(src: PointCloud, src_feat: np.ndarray, dst: PointCloud, dst_feat: np.ndarray,
                    params: RansacParams = RansacParams()) -> RegistrationResult:
    """Feature-matching RANSAC: hypotheses from 4 FPFH correspondences, scored on all points."""
    if len(src) < params.sample_size or len(dst) < params.sample_size:
        raise ValueError("both clouds need at least sample_size points")
    rng = np.random.default_rng(params.seed)
    tau = params.inlier_distance
    # nearest neighbour in feature space, source -> target
    _, corr = cKDTree(dst_feat).query(src_feat, k=1)
    cs, cd = src.points, dst.points[corr]
    dst_tree = cKDTree(dst.points)
    n = len(cs)

    best_pose, best_fit, best_rmse = Pose.identity(), -1.0, np.inf
    best_inliers = 0
    needed = params.max_iterations
    it = 0
    while it < min(needed, params.max_iterations):
        B = min(params.batch, params.max_iterations - it)
        it += B
        picks = np.stack([rng.choice(n, params.sample_size, replace=False) for _ in range(B)])
        ps, pd = cs[picks], cd[picks]
        # edge-length consistency prunes most wrong samples before any solve
        i, j = np.triu_indices(params.sample_size, 1)
        ls = np.linalg.norm(ps[:, i] - ps[:, j], axis=-1)
        ld = np.linalg.norm(pd[:, i] - pd[:, j], axis=-1)
        ok = np.all((np.minimum(ls, ld) >= params.edge_similarity * np.maximum(ls, ld)), axis=1)
        if not ok.any():
            continue
        R, t = kabsch(ps[ok], pd[ok])
        moved = np.einsum("bij,nj->bni", R, cs) + t[:, None, :]
        inl = np.linalg.norm(moved - cd[None], axis=-1) < tau
        counts = inl.sum(axis=1)
        for b in np.argsort(-counts, kind="stable")[:4]:
            if counts[b] < params.sample_size:
                break
            pose = Pose(R[b], t[b])
            fit, rmse = evaluate_registration(cs, dst_tree, pose, tau)
            if fit > best_fit or (fit == best_fit and rmse < best_rmse):
                best_pose, best_fit, best_rmse = pose, fit, rmse
            if counts[b] > best_inliers:
                best_inliers = int(counts[b])
                w = best_inliers / n
                if w >= 1.0:
                    needed = it
                else:
                    needed = int(np.ceil(np.log(1 - params.confidence) / np.log(1 - w ** params.sample_size)))
    if best_fit < 0:
        return RegistrationResult(Pose.identity(), 0.0, 0.0, it)
    # polish on every correspondence consistent with the winner
    moved = best_pose.apply(cs)
    inl = np.linalg.norm(moved - cd, axis=1) < tau
    if inl.sum() >= 3:
        R, t = kabsch(cs[inl], cd[inl])
        pose = Pose(R, t)
        fit, rmse = evaluate_registration(cs, dst_tree, pose, tau)
        if fit >= best_fit:
            best_pose, best_fit, best_rmse = pose, fit, rmse
    return RegistrationResult(best_pose, best_fit, best_rmse, it)


def _skew_solve(src, dst, normals):
    """One Gauss-Newton step of point-to-plane alignment (small-angle linearisation)."""
    A = np.concatenate([np.cross(src, normals), normals], axis=1)
    b = -np.einsum("ij,ij->i", src - dst, normals)
    x, *_ = np.linalg.lstsq(A.T @ A, A.T @ b, rcond=None)
    w, t = x[:3], x[3:]
    theta = np.linalg.norm(w)
    if theta > 0:
        k = w / theta
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K
    else:
        R = np.eye(3)
    return Pose(R, t)


def icp_point_to_plane(src: PointCloud, dst: PointCloud, init: Pose = None,
                       params: IcpParams = IcpParams()) -> RegistrationResult:
    if dst.normals is None:
        raise ValueError("target cloud needs normals")
    pose = init or Pose.identity()
    tree = cKDTree(dst.points)
    fitness, rmse = evaluate_registration(src.points, tree, pose, params.max_distance)
    if fitness == 0.0:
        return RegistrationResult(pose, 0.0, 0.0, 0)
    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = pose.apply(src.points)
        d, idx = tree.query(moved, k=1, distance_upper_bound=params.max_distance)
        ok = np.isfinite(d)
        if ok.sum() < 6:
            break
        step = _skew_solve(moved[ok], dst.points[idx[ok]], dst.normals[idx[ok]])
        pose = step.compose(pose)
        new_fit, new_rmse = evaluate_registration(src.points, tree, pose, params.max_distance)
        done = (abs(new_fit - fitness) < params.relative_fitness * max(fitness, 1e-12)
                and abs(new_rmse - rmse) < params.relative_rmse * max(rmse, 1e-12))
        fitness, rmse = new_fit, new_rmse
        if done:
            break
    return RegistrationResult(pose, fitness, rmse, it)


def rescore(result: RegistrationResult, src: PointCloud, dst: PointCloud, distance: float) -> RegistrationResult:
    """Fitness and RMSE of ``result.transform`` at a given inlier distance.

    ICP gathers correspondences over a wider radius than the acceptance test uses;
    scoring at the RANSAC inlier distance keeps the threshold comparable across stages.
    """
    fitness, rmse = evaluate_registration(src.points, cKDTree(dst.points), result.transform, distance)
    return RegistrationResult(result.transform, fitness, rmse, result.n_iterations)


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def prepare_cloud(cloud: PointCloud, voxel: float, k_neighbors: int = 10, viewpoint=None,
                  fpfh_factor: float = 2.5) -> tuple[PointCloud, np.ndarray]:
    """Downsample, estimate normals and FPFH, as used on both sides of registration."""
    from ..core import voxel_downsample

    down = voxel_downsample(PointCloud(cloud.points), voxel)
    k = min(k_neighbors, len(down))
    if viewpoint is not None and np.ndim(viewpoint) == 2:
        viewpoint = None
    down.normals = estimate_normals(down, k, viewpoint)
    if cloud.normals is not None and viewpoint is None:
        # keep the orientation of the source normals where available
        _, idx = cKDTree(cloud.points).query(down.points, k=1)
        flip = np.einsum("ij,ij->i", down.normals, cloud.normals[idx]) < 0
        down.normals[flip] *= -1.0
    feat, _ = compute_fpfh(down, fpfh_factor * voxel)
    return down, feat
