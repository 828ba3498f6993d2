"""Online orchestration: object discovery, box growth, keyframes and the training schedule."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .config import RunConfig
from .core import (BoxTransform, Frame, PointCloud, backproject, filter_depth_outliers,
                   pixel_rays, voxel_downsample)
from .field import FeatureGrid, ObjectModel, reinterpolate_grid
from .render import LossReport, RayBatch, train_step

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Keyframe:
    frame: Frame
    pixels: dict  # instance id -> flat pixel indices eligible for sampling
    origin: str = "observed"

    @property
    def index(self) -> int:
        return self.frame.index


@dataclass
class Event:
    frame: int
    object_id: int
    kind: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"frame": self.frame, "object": self.object_id, "kind": self.kind, **self.detail},
                          sort_keys=True)


@dataclass(eq=False)
class LibraryBinding:
    entry: object
    transform: object  # Pose: entry object frame -> world
    snapshot: ObjectModel
    poses: list  # world camera poses for synthesis
    intrinsics: object
    cache: dict = field(default_factory=dict)


@dataclass(eq=False)
class ObjectState:
    instance_id: int
    model: ObjectModel
    coarse_cloud: PointCloud
    first_seen: int
    category: Optional[int] = None
    keyframes: list = field(default_factory=list)
    running: deque = field(default_factory=lambda: deque(maxlen=2))
    prior: Optional[LibraryBinding] = None
    retry_prior: bool = True
    last_loss: Optional[LossReport] = None
    n_extensions: int = 0


@dataclass(eq=False)
class SceneState:
    config: RunConfig = field(default_factory=RunConfig)
    objects: dict = field(default_factory=dict)
    last_index: int = -1
    events: list = field(default_factory=list)
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)

    def emit(self, frame: int, obj: int, kind: str, **detail) -> Event:
        ev = Event(frame, obj, kind, detail)
        self.events.append(ev)
        return ev

    def event_log(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def object_pixels(frame: Frame, instance_id: int, margin: int) -> np.ndarray:
    """Flat indices of the mask's bounding rectangle grown by ``margin`` pixels."""
    vs, us = np.nonzero(frame.masks == instance_id)
    h, w = frame.shape
    v0, v1 = max(vs.min() - margin, 0), min(vs.max() + margin, h - 1)
    u0, u1 = max(us.min() - margin, 0), min(us.max() + margin, w - 1)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    return (vv * w + uu).ravel()


def push_keyframe(obj: ObjectState, kf: Keyframe, capacity: int) -> Optional[Keyframe]:
    """Append ``kf``; when over capacity evict the oldest keyframe except the first one."""
    obj.keyframes.append(kf)
    if len(obj.keyframes) > capacity:
        return obj.keyframes.pop(1 if capacity > 1 else 0)
    return None


def _grow_box(old: BoxTransform, cloud: PointCloud, margin: float, min_extent: float) -> BoxTransform:
    # AABB over the cloud with margin, unioned with the old box so boxes never shrink
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    c = 0.5 * (lo + hi)
    half = 0.5 * np.maximum((hi - lo) * (1.0 + margin), min_extent)
    olo, ohi = old.world_bounds()
    lo = np.minimum(c - half, olo)
    hi = np.maximum(c + half, ohi)
    return BoxTransform(hi - lo, 0.5 * (lo + hi))


def maybe_extend_box(obj: ObjectState, new_points: PointCloud, config: RunConfig,
                     rng: np.random.Generator, mode: Optional[str] = None) -> bool:
    """Grow the object's box when new points fall outside it and remap both grids.

    ``mode`` overrides ``config.objmap.grid_update``: ``"interpolate"`` resamples the
    old grids, ``"reinit"`` discards them.
    """
    model = obj.model
    outside = ~model.box.contains(new_points.points)
    if outside.sum() < max(config.objmap.extension_hysteresis, 1):
        return False
    new_box = _grow_box(model.box, obj.coarse_cloud.concat(new_points), config.objmap.box_margin,
                        config.objmap.min_box_extent)
    set_box(obj, new_box, rng, mode or config.objmap.grid_update)
    return True


def set_box(obj: ObjectState, new_box: BoxTransform, rng: np.random.Generator, mode: str = "interpolate") -> None:
    model = obj.model
    delta = np.linalg.inv(model.box.matrix()) @ new_box.matrix()
    for name in ("geo_grid", "col_grid"):
        old: FeatureGrid = getattr(model, name)
        if mode == "interpolate":
            new = reinterpolate_grid(old, delta, rng)
        elif mode == "reinit":
            new = FeatureGrid.random(old.config, rng, old.levels[0].dtype)
        else:
            raise ValueError(f"unknown grid update mode {mode!r}")
        setattr(model, name, new)
    model.box = new_box
    if model.optimizer_state is not None:
        model.optimizer_state.reset([k for k in model.parameters() if "_grid." in k])
    obj.n_extensions += 1


def ingest_frame(scene: SceneState, frame: Frame) -> list[Event]:
    if frame.index <= scene.last_index:
        raise ValueError(f"frame {frame.index} arrived after frame {scene.last_index}")
    scene.last_index = frame.index
    cfg = scene.config
    om = cfg.objmap
    start = len(scene.events)
    is_keyframe = frame.index % om.keyframe_every == 0
    for iid in frame.instance_ids():
        f = frame
        if om.depth_filter_alpha > 0:
            f = filter_depth_outliers(frame, iid, om.depth_filter_alpha)
        valid = int(np.count_nonzero((f.masks == iid) & (f.depth > 0)))
        if valid < om.min_mask_pixels:
            continue
        cloud = voxel_downsample(backproject(f, iid), om.voxel)
        obj = scene.objects.get(iid)
        if obj is None:
            from .core import update_bounding_box
            box = update_bounding_box(cloud, om.box_margin, om.min_box_extent)
            model = ObjectModel.create(box, scene.rng, cfg.grid_config())
            model.optimizer_state = cfg.new_optimizer()
            obj = ObjectState(iid, model, cloud, frame.index, f.categories.get(iid))
            scene.objects[iid] = obj
            scene.emit(frame.index, iid, "ObjectCreated", extent=[round(float(x), 6) for x in box.extent])
        else:
            extended = maybe_extend_box(obj, cloud, cfg, scene.rng)
            obj.coarse_cloud = voxel_downsample(obj.coarse_cloud.concat(cloud), om.voxel)
            if extended:
                scene.emit(frame.index, iid, "BoxExtended",
                           extent=[round(float(x), 6) for x in obj.model.box.extent])
                if obj.prior is None:
                    obj.retry_prior = True
        kf = Keyframe(f, {iid: object_pixels(f, iid, om.pixel_margin)})
        obj.running.append(kf)
        if is_keyframe:
            evicted = push_keyframe(obj, kf, om.buffer)
            scene.emit(frame.index, iid, "KeyframeStored", buffer=len(obj.keyframes))
            if evicted is not None:
                scene.emit(frame.index, iid, "KeyframeEvicted", evicted=evicted.index)
    return scene.events[start:]


def select_keyframes(obj: ObjectState, count: int, rng: np.random.Generator,
                     synthesizer: Optional[Callable[[int], list]] = None) -> list[Keyframe]:
    """Uniform draw without replacement from stored + running frames.

    With a prior bound, ``count // 2`` slots go to views produced by ``synthesizer``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    pool = {kf.index: kf for kf in obj.keyframes}
    for kf in obj.running:
        pool.setdefault(kf.index, kf)
    pool = [pool[k] for k in sorted(pool)]
    if not pool:
        raise ValueError(f"object {obj.instance_id} has no keyframes")
    n_synth = count // 2 if (obj.prior is not None and synthesizer is not None) else 0
    n_obs = min(count - n_synth, len(pool))
    picks = [pool[i] for i in rng.choice(len(pool), size=n_obs, replace=False)]
    if n_synth:
        picks += synthesizer(n_synth)
    return picks


def rays_from_keyframes(keyframes: list, instance_id: int, n_rays: int, rng: np.random.Generator) -> RayBatch:
    """Random pixels from each keyframe's eligible set, split evenly across keyframes."""
    parts = []
    per = np.full(len(keyframes), n_rays // len(keyframes))
    per[: n_rays % len(keyframes)] += 1
    for kf, n in zip(keyframes, per):
        cand = kf.pixels[instance_id]
        pix = cand[rng.integers(0, len(cand), int(n))]
        f = kf.frame
        h, w = f.shape
        vs, us = np.divmod(pix, w)
        dirs = pixel_rays(f.intrinsics, us, vs) @ f.pose.rotation.T
        parts.append(RayBatch(np.broadcast_to(f.pose.translation, dirs.shape).copy(), dirs,
                              f.color.reshape(-1, 3)[pix].astype(np.float64),
                              f.depth.reshape(-1)[pix].astype(np.float64),
                              (f.masks.reshape(-1)[pix] == instance_id).astype(np.float64),
                              np.full(len(pix), kf.origin == "synthesized")))
    return RayBatch.concat(parts)


def train_objects(scene: SceneState, steps: Optional[int] = None) -> dict:
    """Run the per-frame optimisation schedule for every live object."""
    cfg = scene.config
    steps = cfg.objmap.steps_per_frame if steps is None else steps
    n_obj = max(len(scene.objects), 1)
    n_rays = max(cfg.rays.total // n_obj, cfg.rays.min_rays_per_object)
    ray_cfg, weights = cfg.ray_config(), cfg.loss_weights()
    reports = {}
    for iid in sorted(scene.objects):
        obj = scene.objects[iid]
        synth = None
        if obj.prior is not None and cfg.library.synthesize:
            from .library import synthesize_keyframes
            synth = lambda n, o=obj: synthesize_keyframes(o.prior, n, scene.rng, cfg, o.instance_id)  # noqa: E731
        for _ in range(steps):
            kfs = select_keyframes(obj, cfg.rays.keyframes, scene.rng, synth)
            batch = rays_from_keyframes(kfs, iid, n_rays, scene.rng)
            obj.last_loss = train_step(obj.model, batch, ray_cfg, weights, scene.rng)
        reports[iid] = obj.last_loss
    return reports


def run_sequence(frames: Iterable[Frame], config: Optional[RunConfig] = None, library=None,
                 callback: Optional[Callable[[SceneState, Frame], None]] = None,
                 scene: Optional[SceneState] = None) -> SceneState:
    """Stream frames: ingest, attempt prior binding, then train every object."""
    scene = scene or SceneState(config or RunConfig())
    it = iter(frames)
    while True:
        try:
            frame = next(it)
        except StopIteration:
            break
        except Exception as exc:  # surface dataset failures with their position
            raise RuntimeError(f"failed to read frame after index {scene.last_index}: {exc}") from exc
        events = ingest_frame(scene, frame)
        if library is not None:
            touched = {e.object_id for e in events if e.kind in ("ObjectCreated", "BoxExtended")}
            for iid in sorted(touched):
                obj = scene.objects[iid]
                if obj.prior is None and obj.retry_prior:
                    from .library import attempt_prior
                    attempt_prior(scene, obj, frame, library)
        if scene.objects:
            reports = train_objects(scene)
            for iid, rep in reports.items():
                if rep is not None:
                    log.debug("frame %d object %d loss %.4f", frame.index, iid, rep.total)
        if callback is not None:
            callback(scene, frame)
    return scene
