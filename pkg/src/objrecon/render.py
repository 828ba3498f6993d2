"""Ray sampling, occupancy compositing, losses and the AdamW training step."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BoxTransform, to_box_coords
from .field import GradientBuffer, ObjectModel, field_backward, field_forward, group_of


@dataclass(frozen=True)
class RaySampleConfig:
    n_total: int = 14
    n_surface: int = 13
    sigma: float = 0.05 / 3.0
    n_synth: int = 24

    def __post_init__(self):
        if not 1 <= self.n_surface < self.n_total:
            raise ValueError("need 1 <= n_surface < n_total")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 5.0
    lambda_mask: float = 10.0
    variance_floor: float = 1e-6
    # False treats the rendered variance as a constant per-ray weight when training;
    # True differentiates through it as well (the exact gradient of the loss value)
    variance_gradient: bool = False


@dataclass
class RenderSample:
    depths: np.ndarray
    occupancies: np.ndarray
    colors: np.ndarray
    weights: np.ndarray
    color: np.ndarray
    depth: float
    mask: float
    variance: float


@dataclass
class AdamWState:
    lr_grid: float = 5e-3
    lr_mlp: float = 3.5e-4
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.lr_grid if group_of(name).endswith("grid") else self.lr_mlp

    def reset(self, names) -> None:
        """Drop the moments of ``names`` (used when a parameter's meaning changes)."""
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)


def sample_ray_depths(measured_depth: float, box_near: float, cfg: RaySampleConfig,
                      rng: np.random.Generator) -> np.ndarray:
    if measured_depth <= 0:
        raise ValueError("measured depth must be positive; route invalid rays to the mask-only path")
    return sample_depths_batch(np.array([measured_depth]), np.array([box_near]), cfg, rng)[0]


def sample_depths_batch(measured: np.ndarray, near: np.ndarray, cfg: RaySampleConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """(R, n_total) sorted depths: Gaussian around the measurement plus uniform free-space draws."""
    R = len(measured)
    n_uni = cfg.n_total - cfg.n_surface
    surf = measured[:, None] + cfg.sigma * rng.standard_normal((R, cfg.n_surface))
    lo = np.asarray(near, dtype=np.float64)
    hi = measured - 3.0 * cfg.sigma
    collapsed = hi <= lo
    # no room in front of the surface band: draw inside the band itself
    lo = np.where(collapsed, measured - 3.0 * cfg.sigma, lo)
    hi = np.where(collapsed, measured + 3.0 * cfg.sigma, hi)
    uni = lo[:, None] + (hi - lo)[:, None] * rng.random((R, n_uni))
    d = np.sort(np.concatenate([surf, uni], axis=1), axis=1)
    return np.maximum(d, 1e-6)


def uniform_depths(near: np.ndarray, far: np.ndarray, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``n`` sorted depths per ray over [near, far]; stratified-jittered when ``rng`` is given."""
    t = (np.arange(n) + 0.5) / n if rng is None else (np.arange(n) + rng.random((len(near), n))) / n
    return near[:, None] + (far - near)[:, None] * t


def ray_box_intersect(origins: np.ndarray, dirs: np.ndarray, box: BoxTransform):
    """Slab test in the box frame; returns (t_near, t_far, hit) in units of ``dirs``."""
    o = (origins - box.center) @ box.rotation
    d = dirs @ box.rotation
    half = 0.5 * box.extent
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half - o) * inv
        t1 = (half - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax, tmax > tmin


def composite(occupancies, colors, depths) -> RenderSample:
    o = np.asarray(occupancies, dtype=np.float64)
    c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(depths, dtype=np.float64)
    w, C, D, M, V = composite_batch(o[None], c[None], d[None])
    return RenderSample(d, o, c, w[0], C[0], float(D[0]), float(M[0]), float(V[0]))


def composite_batch(o: np.ndarray, c: np.ndarray, d: np.ndarray):
    """Batched compositing over rays (R, N); returns weights, colour, depth, mask, variance."""
    trans = np.cumprod(np.concatenate([np.ones_like(o[:, :1]), 1.0 - o[:, :-1]], axis=1), axis=1)
    w = o * trans
    C = np.einsum("rn,rnc->rc", w, c)
    D = np.einsum("rn,rn->r", w, d)
    M = w.sum(axis=1)
    V = np.einsum("rn,rn->r", w, (d - D[:, None]) ** 2)
    return w, C, D, M, V


def composite_backward(o, c, d, w, D, M, dC, dD, dM, dV):
    """Adjoints of (occupancy, colour) given adjoints of the rendered quantities."""
    g = dD[:, None] * d + dM[:, None]
    if dC is not None:
        g = g + np.einsum("rc,rnc->rn", dC, c)
    g = g + dV[:, None] * ((d - D[:, None]) ** 2 - 2.0 * d * (D * (1.0 - M))[:, None])
    n = o.shape[1]
    trans = np.cumprod(np.concatenate([np.ones_like(o[:, :1]), 1.0 - o[:, :-1]], axis=1), axis=1)
    # tail[k] = sum_{i>k} g_i o_i prod_{k<j<i} (1 - o_j), built back to front
    tail = np.zeros_like(o)
    for k in range(n - 2, -1, -1):
        tail[:, k] = g[:, k + 1] * o[:, k + 1] + (1.0 - o[:, k + 1]) * tail[:, k + 1]
    d_o = trans * (g - tail)
    d_c = None if dC is None else w[:, :, None] * dC[:, None, :]
    return d_o, d_c


def _losses(C, D, M, V, tC, tD, tM, weights: LossWeights):
    valid = tD > 0
    Vf = np.maximum(V, weights.variance_floor)
    l_col = tM * np.abs(tC - C).sum(axis=-1)
    l_depth = np.where(valid, tM * np.abs(tD - D) / np.sqrt(Vf), 0.0)
    l_mask = np.abs(tM - M)
    total = l_depth + weights.lambda_color * l_col + weights.lambda_mask * l_mask
    return total, l_depth, l_col, l_mask


def compute_losses(render: RenderSample, color, depth: float, mask: float,
                   weights: LossWeights = LossWeights()) -> dict:
    if mask not in (0, 1):
        raise ValueError("target mask must be binary")
    total, ld, lc, lm = _losses(render.color[None], np.array([render.depth]), np.array([render.mask]),
                                np.array([render.variance]), np.asarray(color, dtype=np.float64)[None],
                                np.array([depth], dtype=np.float64), np.array([mask], dtype=np.float64), weights)
    return {"depth": float(ld[0]), "color": float(lc[0]), "mask": float(lm[0]), "total": float(total[0])}


def loss_adjoints(C, D, M, V, tC, tD, tM, weights: LossWeights, scale: float):
    """d(total)/d(C, D, M, V) per ray, multiplied by ``scale``."""
    valid = (tD > 0).astype(np.float64)
    Vf = np.maximum(V, weights.variance_floor)
    sq = np.sqrt(Vf)
    dC = -weights.lambda_color * tM[:, None] * np.sign(tC - C)
    dD = -valid * tM * np.sign(tD - D) / sq
    if weights.variance_gradient:
        dV = np.where(V > weights.variance_floor, -0.5 * valid * tM * np.abs(tD - D) / (Vf * sq), 0.0)
    else:
        dV = np.zeros_like(D)
    dM = -weights.lambda_mask * np.sign(tM - M)
    return dC * scale, dD * scale, dM * scale, dV * scale


@dataclass
class RayBatch:
    """World-space rays with unit camera-z step so ray parameter equals depth."""

    origins: np.ndarray
    dirs: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    synthetic: Optional[np.ndarray] = None  # rays rendered from a prior rather than observed

    def __post_init__(self):
        if self.synthetic is None:
            self.synthetic = np.zeros(len(self.depth), dtype=bool)

    def __len__(self) -> int:
        return len(self.depth)

    def subset(self, sel) -> "RayBatch":
        return RayBatch(self.origins[sel], self.dirs[sel], self.color[sel], self.depth[sel], self.mask[sel],
                        self.synthetic[sel])

    @classmethod
    def concat(cls, batches) -> "RayBatch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("origins", "dirs", "color", "depth", "mask", "synthetic")))


@dataclass
class LossReport:
    total: float = 0.0
    depth: float = 0.0
    color: float = 0.0
    mask: float = 0.0
    n_rays: int = 0


def sample_batch_depths(batch: RayBatch, box: BoxTransform, cfg: RaySampleConfig,
                        rng: np.random.Generator, n_uniform: Optional[int] = None):
    """Per-ray sample depths; returns (kept RayBatch, depths (R, N)).

    Positive rays with depth use the surface/free-space scheme.  Rays without a
    usable depth, and negative rays, are sampled uniformly across the box up to
    the measured surface (anything before a measured surface is free space).
    Negative rays whose measurement lies in front of the box carry no
    information about this object and are dropped.
    """
    n_uniform = n_uniform or cfg.n_total
    near, far, hit = ray_box_intersect(batch.origins, batch.dirs, box)
    pos = batch.mask > 0.5
    has_d = batch.depth > 0
    surf_ray = pos & has_d
    lim = np.where(has_d & ~pos, np.minimum(far, batch.depth - 3.0 * cfg.sigma), far)
    keep = hit & (surf_ray | (lim > near))
    idx = np.nonzero(keep)[0]
    sub = batch.subset(idx)
    near, lim, surf_ray = near[idx], lim[idx], surf_ray[idx]
    N = cfg.n_total
    depths = np.empty((len(idx), N))
    if surf_ray.any():
        depths[surf_ray] = sample_depths_batch(sub.depth[surf_ray], near[surf_ray], cfg, rng)
    other = ~surf_ray
    if other.any():
        depths[other] = uniform_depths(near[other], lim[other], N, rng)
    return sub, depths


def sample_synthetic_depths(batch: RayBatch, box: BoxTransform, cfg: RaySampleConfig,
                            rng: np.random.Generator):
    """Stratified uniform samples across each ray's box segment (no depth prior is trusted)."""
    near, far, hit = ray_box_intersect(batch.origins, batch.dirs, box)
    idx = np.nonzero(hit)[0]
    return batch.subset(idx), uniform_depths(near[idx], far[idx], cfg.n_synth, rng)


def render_loss(model: ObjectModel, batch: RayBatch, depths: np.ndarray, weights: LossWeights,
                buf: Optional[GradientBuffer] = None, grad_scale: float = 1.0):
    """Mean per-ray loss of ``model`` on fixed sample depths; accumulates gradients into ``buf``.

    ``grad_scale`` multiplies the accumulated gradient, so several calls can share
    one buffer and still produce the gradient of a pooled mean.
    """
    R, N = depths.shape
    if R == 0:
        return LossReport()
    dtype = model.dtype
    pts = batch.origins[:, None, :] + depths[..., None] * batch.dirs[:, None, :]
    x = to_box_coords(pts.reshape(-1, 3), model.box)
    inside = np.all((x >= 0.0) & (x <= 1.0), axis=1)
    occ = np.zeros(R * N, dtype=dtype)
    col = np.zeros((R * N, 3), dtype=dtype)
    occ_in, col_in, cache = field_forward(model, x[inside])
    occ[inside] = occ_in
    col[inside] = col_in
    o = occ.reshape(R, N).astype(np.float64)
    c = col.reshape(R, N, 3).astype(np.float64)
    w, C, D, M, V = composite_batch(o, c, depths)
    tM = batch.mask.astype(np.float64)
    total, ld, lc, lm = _losses(C, D, M, V, batch.color, batch.depth, tM, weights)
    report = LossReport(float(total.mean()), float(ld.mean()), float(lc.mean()), float(lm.mean()), R)
    if buf is not None:
        dC, dD, dM, dV = loss_adjoints(C, D, M, V, batch.color, batch.depth, tM, weights, grad_scale / R)
        d_o, d_c = composite_backward(o, c, depths, w, D, M, dC, dD, dM, dV)
        field_backward(model, cache, d_o.reshape(-1)[inside], d_c.reshape(-1, 3)[inside], buf)
    return report


def adamw_update(params: dict, grads: dict, state: AdamWState) -> dict:
    """In-place decoupled-weight-decay Adam step over the named parameters."""
    for k, p in params.items():
        if k not in grads or grads[k].shape != p.shape:
            raise ValueError(f"gradient for {k!r} missing or mis-shaped")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        lr = state.lr_for(k)
        p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + state.eps
        p -= (lr / bc1) * m / denom
    return params


def train_step(model: ObjectModel, batch: RayBatch, cfg: RaySampleConfig, weights: LossWeights,
               rng: np.random.Generator, state: Optional[AdamWState] = None) -> LossReport:
    """One optimisation step on a ray batch; frozen parameter groups are left untouched."""
    if len(batch) == 0:
        return LossReport()
    if state is None:
        if model.optimizer_state is None:
            model.optimizer_state = AdamWState()
        state = model.optimizer_state
    parts = []
    obs = ~batch.synthetic
    if obs.any():
        parts.append(sample_batch_depths(batch.subset(obs), model.box, cfg, rng))
    if batch.synthetic.any():
        parts.append(sample_synthetic_depths(batch.subset(batch.synthetic), model.box, cfg, rng))
    trainable = model.trainable()
    buf = GradientBuffer(model)
    n_total = sum(len(p[0]) for p in parts)
    report = LossReport()
    for sub, depths in parts:
        if len(sub) == 0:
            continue
        frac = len(sub) / n_total
        r = render_loss(model, sub, depths, weights, buf if trainable else None, frac)
        report.total += frac * r.total
        report.depth += frac * r.depth
        report.color += frac * r.color
        report.mask += frac * r.mask
        report.n_rays += r.n_rays
    if trainable and n_total:
        adamw_update(trainable, {k: buf[k] for k in trainable}, state)
    return report
