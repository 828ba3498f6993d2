"""Retrieval, registration-based binding of library priors and keyframe synthesis."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import Frame, PointCloud, Pose, backproject, pixel_rays, project, voxel_downsample
from ..render import ray_box_intersect
from .descriptor import DescriptorView, compute_view_descriptor
from .entry import Library, LibraryEntry, render_view, scaled_intrinsics
from .registration import (IcpParams, RansacParams, RegistrationResult, compute_fpfh, estimate_normals,
                           icp_point_to_plane, ransac_register, rescore)

log = logging.getLogger(__name__)

ALL_GROUPS = ("geo_grid", "geo_mlp", "col_grid", "col_mlp")


@dataclass
class RetrievalCandidate:
    entry: LibraryEntry
    similarity: float


def retrieve(library, query: np.ndarray, category: Optional[int] = None, m: int = 3,
             threshold: float = 0.7) -> list[RetrievalCandidate]:
    """Top-``m`` entries by cosine similarity, restricted to the query category when both sides have one."""
    if m < 1:
        raise ValueError("m must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    out = []
    for e in library:
        if category is not None and e.category is not None and e.category != category:
            continue
        if e.descriptor.shape != q.shape:
            raise ValueError(f"descriptor of {e.name!r} has dimension {e.descriptor.shape}, query {q.shape}")
        sim = float(np.clip(np.dot(e.descriptor, q) / np.linalg.norm(e.descriptor), -1.0, 1.0))
        out.append(RetrievalCandidate(e, sim))
    out.sort(key=lambda c: -c.similarity)
    return [c for c in out[:m] if c.similarity >= threshold]


@dataclass
class Verification:
    accepted: bool
    in_mask: float
    depth_ok: bool
    n_visible: int


def verify_registration(object_to_world: Pose, cloud: PointCloud, frame: Frame, instance_id: int,
                        min_in_mask: float = 0.90, depth_tolerance: float = 0.02) -> Verification:
    """Reprojection check of a registered library cloud against the live frame.

    Accepted iff at least ``min_in_mask`` of the points landing in the image fall in
    the instance mask and no point lies more than ``depth_tolerance`` in front of a
    valid measured depth.
    """
    pts = object_to_world.apply(cloud.points)
    uv, z = project(pts, frame.pose, frame.intrinsics)
    h, w = frame.shape
    with np.errstate(invalid="ignore"):
        u, v = np.rint(uv[:, 0]), np.rint(uv[:, 1])
        vis = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    n = int(vis.sum())
    if n == 0:
        return Verification(False, 0.0, False, 0)
    ui, vi = u[vis].astype(int), v[vis].astype(int)
    in_mask = float(np.mean(frame.masks[vi, ui] == instance_id))
    d_in = frame.depth[vi, ui]
    valid = d_in > 0
    depth_ok = bool(np.all(z[vis][valid] >= d_in[valid] - depth_tolerance))
    return Verification(in_mask >= min_in_mask and depth_ok, in_mask, depth_ok, n)


def initialize_from_prior(obj, entry: LibraryEntry, object_to_world: Pose, config) -> "LibraryBinding":
    """Replace the object's model by a copy of the entry's, moved into the world frame.

    MLPs are frozen; grids stay trainable unless ``config.library.freeze_grids``.
    A frozen snapshot is kept as the source of synthesized keyframes.
    """
    from ..objmap import LibraryBinding

    model = entry.model.copy()
    model.box = entry.model.box.transformed(object_to_world)
    model.frozen = {"geo_mlp", "col_mlp"}
    if config.library.freeze_grids:
        model.frozen |= {"geo_grid", "col_grid"}
    model.optimizer_state = config.new_optimizer()
    snapshot = model.copy()
    snapshot.frozen = set(ALL_GROUPS)
    snapshot.optimizer_state = None
    obj.model = model
    poses = [object_to_world.compose(p) for p in entry.poses]
    K = scaled_intrinsics(entry.intrinsics, config.rays.synth_scale)
    binding = LibraryBinding(entry, object_to_world, snapshot, poses, K)
    obj.prior = binding
    return binding


def synthesize_keyframes(binding, count: int, rng: np.random.Generator, config, instance_id: int) -> list:
    """Render ``count`` pseudo-observations of the frozen prior from stored poses.

    Colour and depth are normalised by the rendered mask; the mask target is the
    rendered mask binarised at 0.5.  Renders are cached per pose.
    """
    from ..objmap import Keyframe

    if count < 1:
        raise ValueError("count must be >= 1")
    if not binding.poses:
        raise ValueError("prior has no stored poses")
    n = len(binding.poses)
    picks = rng.choice(n, size=count, replace=count > n)
    out = []
    for i in picks:
        i = int(i)
        kf = binding.cache.get(i)
        if kf is None:
            rv = render_view(binding.snapshot, binding.poses[i], binding.intrinsics, config.rays.synth_per_ray)
            mask = rv.mask >= 0.5
            depth = np.where(mask, rv.depth, 0.0).astype(np.float32)
            frame = Frame(-1 - i, rv.color.astype(np.float32), depth, np.where(mask, instance_id, 0).astype(np.int32),
                          rv.pose, rv.intrinsics)
            K = rv.intrinsics
            vv, uu = np.mgrid[0:K.height, 0:K.width]
            dirs = pixel_rays(K, uu.ravel(), vv.ravel()) @ rv.pose.rotation.T
            _, _, hit = ray_box_intersect(np.broadcast_to(rv.pose.translation, dirs.shape), dirs,
                                          binding.snapshot.box)
            kf = Keyframe(frame, {instance_id: np.nonzero(hit)[0]}, origin="synthesized")
            binding.cache[i] = kf
        out.append(kf)
    return out


def live_cloud(frame: Frame, instance_id: int, voxel: float, k_neighbors: int = 10) -> PointCloud:
    """Current partial view of an object with camera-facing normals."""
    cloud = voxel_downsample(backproject(frame, instance_id), voxel)
    if len(cloud) < k_neighbors:
        raise ValueError("too few points for registration")
    cloud.normals = estimate_normals(cloud, k_neighbors, viewpoint=frame.pose.translation)
    return cloud


def register_to_entry(live: PointCloud, live_fpfh: np.ndarray, entry: LibraryEntry, voxel: float,
                      seed: int = 0) -> RegistrationResult:
    """World-to-object registration of the live cloud onto the entry cloud (RANSAC then ICP)."""
    params = RansacParams(voxel=voxel, seed=seed)
    coarse = ransac_register(live, live_fpfh, entry.cloud, entry.fpfh, params)
    fine = icp_point_to_plane(live, entry.cloud, coarse.transform, IcpParams(max_distance=2.0 * voxel))
    return rescore(fine, live, entry.cloud, params.inlier_distance)


def object_descriptor(frame: Frame, instance_id: int) -> np.ndarray:
    K = frame.intrinsics
    return compute_view_descriptor([DescriptorView(frame.color, frame.masks == instance_id, frame.depth, K.fx, K.fy)])


def attempt_prior(scene, obj, frame: Frame, library: Library, voxel: float = 0.01) -> bool:
    """Retrieve, register and verify library candidates for ``obj``; bind the first that passes."""
    cfg = scene.config
    lib = cfg.library
    iid = obj.instance_id
    scene.emit(frame.index, iid, "PriorAttachAttempted")
    obj.retry_prior = False  # re-armed by the next box extension

    def reject(reason, **kw):
        scene.emit(frame.index, iid, "PriorRejected", reason=reason, **kw)
        return False

    if not np.any(frame.masks == iid):
        return reject("not_visible")
    cands = retrieve(library, object_descriptor(frame, iid), obj.category, lib.m, lib.sim_threshold)
    if not cands:
        return reject("no_candidate")
    try:
        live = live_cloud(frame, iid, voxel)
    except ValueError:
        return reject("too_few_points")
    live_fpfh, _ = compute_fpfh(live, 2.5 * voxel)
    best = None
    for c in cands:
        reg = register_to_entry(live, live_fpfh, c.entry, voxel, seed=cfg.seed)
        if reg.fitness < lib.fitness_threshold:
            log.debug("object %d: %s fitness %.3f", iid, c.entry.name, reg.fitness)
            best = best or ("low_fitness", c, reg)
            continue
        to_world = reg.transform.inverse()
        ver = verify_registration(to_world, c.entry.cloud, frame, iid, lib.reproj_in_mask, lib.depth_tolerance_m)
        if not ver.accepted:
            best = ("verification", c, reg)
            continue
        initialize_from_prior(obj, c.entry, to_world, cfg)
        scene.emit(frame.index, iid, "PriorAttached", entry=c.entry.name, similarity=round(c.similarity, 6),
                   fitness=round(reg.fitness, 6))
        return True
    reason, c, reg = best
    return reject(reason, entry=c.entry.name, fitness=round(reg.fitness, 6))
