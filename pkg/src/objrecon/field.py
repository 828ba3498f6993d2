"""Per-object implicit field: dense multi-resolution scalar grids + tiny MLPs.

Gradients are written by hand; every parameter is a plain numpy array so an
object's full state is a flat dict of named tensors.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BoxTransform

GRID_INIT_SCALE = 1e-4
# parameter groups that can be frozen independently
GROUPS = ("geo_grid", "geo_mlp", "col_grid", "col_mlp")


@dataclass(frozen=True)
class GridConfig:
    L: int = 3
    N0: int = 16
    gamma: float = 1.5

    def __post_init__(self):
        if self.L < 1 or self.N0 < 2 or self.gamma <= 1:
            raise ValueError(f"invalid grid config {self}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(round(self.N0 * self.gamma ** l)) for l in range(self.L))

    @property
    def n_params(self) -> int:
        return sum(n ** 3 for n in self.sizes)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class FeatureGrid:
    config: GridConfig
    levels: list

    @classmethod
    def random(cls, config: GridConfig, rng: np.random.Generator, dtype=np.float32) -> "FeatureGrid":
        levels = [rng.uniform(-GRID_INIT_SCALE, GRID_INIT_SCALE, n ** 3).astype(dtype) for n in config.sizes]
        return cls(config, levels)

    @classmethod
    def constant(cls, config: GridConfig, value: float, dtype=np.float32) -> "FeatureGrid":
        return cls(config, [np.full(n ** 3, value, dtype=dtype) for n in config.sizes])

    @property
    def n_params(self) -> int:
        return sum(lv.size for lv in self.levels)

    def level_array(self, l: int) -> np.ndarray:
        n = self.config.sizes[l]
        return self.levels[l].reshape(n, n, n)

    def copy(self) -> "FeatureGrid":
        return FeatureGrid(self.config, [lv.copy() for lv in self.levels])


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def _cell_lookup(n: int, x: np.ndarray):
    """Flat indices (m, 8) and trilinear weights (m, 8) of the cell containing each x."""
    u = np.clip(x, 0.0, 1.0) * (n - 1)
    r = np.rint(u)
    u = np.where(np.abs(u - r) < 1e-9, r, u)
    i0 = np.minimum(np.floor(u), n - 2).astype(np.int64)
    f = u - i0
    idx = np.empty(x.shape[:-1] + (8,), dtype=np.int64)
    w = np.empty(x.shape[:-1] + (8,), dtype=x.dtype)
    for c, (a, b, d) in enumerate(_CORNERS):
        idx[..., c] = ((i0[..., 0] + a) * n + (i0[..., 1] + b)) * n + (i0[..., 2] + d)
        wx = f[..., 0] if a else 1.0 - f[..., 0]
        wy = f[..., 1] if b else 1.0 - f[..., 1]
        wz = f[..., 2] if d else 1.0 - f[..., 2]
        w[..., c] = wx * wy * wz
    return idx, w


def encode_batch(grid: FeatureGrid, xs: np.ndarray):
    """Embeddings (m, L) plus the per-level (indices, weights) lookups for backprop."""
    xs = np.asarray(xs, dtype=grid.levels[0].dtype).reshape(-1, 3)
    emb = np.empty((len(xs), grid.config.L), dtype=xs.dtype)
    lookups = []
    for l, n in enumerate(grid.config.sizes):
        idx, w = _cell_lookup(n, xs)
        emb[:, l] = np.einsum("mc,mc->m", grid.levels[l][idx], w)
        lookups.append((idx, w))
    return emb, lookups


def encode(grid: FeatureGrid, x) -> np.ndarray:
    """Concatenated per-level trilinear features; ``x`` may be one point or a batch."""
    x = np.asarray(x, dtype=np.float64)
    emb, _ = encode_batch(grid, x)
    return emb[0] if x.ndim == 1 else emb


def grid_backward(grid: FeatureGrid, lookups, d_emb: np.ndarray, out: list) -> None:
    """Accumulate d(loss)/d(features) into ``out`` (one flat array per level)."""
    for l, (idx, w) in enumerate(lookups):
        contrib = (w * d_emb[:, l:l + 1]).ravel()
        out[l] += np.bincount(idx.ravel(), weights=contrib, minlength=out[l].size).astype(out[l].dtype)


@dataclass(eq=False)
class TinyMLP:
    """ReLU hidden layers, logistic output."""

    weights: list
    biases: list

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, dtype=np.float32) -> "TinyMLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append((rng.uniform(-1.0, 1.0, fan_out) / np.sqrt(fan_in)).astype(dtype))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); the cache holds every layer input."""
        acts = [x]
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = np.maximum(z, 0) if i < len(self.weights) - 1 else _sigmoid(z)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out: np.ndarray, grad_w: Optional[list], grad_b: Optional[list]) -> np.ndarray:
        """Backprop ``d_out`` (adjoint of the logistic output); returns d(input)."""
        y = acts[-1]
        dz = d_out * y * (1.0 - y)
        for i in range(len(self.weights) - 1, -1, -1):
            if grad_w is not None:
                grad_w[i] += acts[i].T @ dz
                grad_b[i] += dz.sum(axis=0)
            dh = dz @ self.weights[i].T
            if i > 0:
                dz = dh * (acts[i] > 0)
        return dh

    def copy(self) -> "TinyMLP":
        return TinyMLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(eq=False)
class ObjectModel:
    geo_grid: FeatureGrid
    col_grid: FeatureGrid
    geo_mlp: TinyMLP
    col_mlp: TinyMLP
    box: BoxTransform
    frozen: set = field(default_factory=set)
    optimizer_state: Optional[object] = None

    @classmethod
    def create(cls, box: BoxTransform, rng: np.random.Generator, config: GridConfig = GridConfig(),
               hidden: int = 64, dtype=np.float32) -> "ObjectModel":
        L = config.L
        return cls(
            FeatureGrid.random(config, rng, dtype),
            FeatureGrid.random(config, rng, dtype),
            TinyMLP.create([L, hidden, 1], rng, dtype),
            TinyMLP.create([L, hidden, hidden, 3], rng, dtype),
            box,
        )

    @property
    def config(self) -> GridConfig:
        return self.geo_grid.config

    @property
    def dtype(self):
        return self.geo_grid.levels[0].dtype

    @property
    def frozen_geo(self) -> bool:
        return {"geo_grid", "geo_mlp"} <= self.frozen

    @property
    def frozen_col(self) -> bool:
        return {"col_grid", "col_mlp"} <= self.frozen

    def freeze(self, *groups: str) -> None:
        for g in groups:
            if g not in GROUPS:
                raise KeyError(g)
        self.frozen |= set(groups)

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every parameter; writing into them updates the model."""
        out = {}
        for name in ("geo", "col"):
            grid: FeatureGrid = getattr(self, f"{name}_grid")
            mlp: TinyMLP = getattr(self, f"{name}_mlp")
            for l, lv in enumerate(grid.levels):
                out[f"{name}_grid.{l}"] = lv
            for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{name}_mlp.W{i}"] = W
                out[f"{name}_mlp.b{i}"] = b
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if group_of(k) not in self.frozen}

    def copy(self) -> "ObjectModel":
        return ObjectModel(self.geo_grid.copy(), self.col_grid.copy(), self.geo_mlp.copy(),
                           self.col_mlp.copy(), self.box, set(self.frozen),
                           copy.deepcopy(self.optimizer_state))


def group_of(name: str) -> str:
    return name.split(".")[0]


class GradientBuffer:
    """Per-parameter accumulators shaped like an ObjectModel's parameters."""

    def __init__(self, model: ObjectModel):
        self.grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}

    def check(self, model: ObjectModel) -> None:
        params = model.parameters()
        if params.keys() != self.grads.keys() or any(params[k].shape != g.shape for k, g in self.grads.items()):
            raise ValueError("gradient buffer does not match model parameters")

    def zero(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def items(self):
        return self.grads.items()

    def _group(self, name: str, n: int, kind: str) -> list:
        return [self.grads[f"{name}.{kind}{i}"] for i in range(n)]


@dataclass
class FieldCache:
    geo_lookups: list
    geo_acts: list
    col_lookups: list
    col_acts: list


def field_forward(model: ObjectModel, xs: np.ndarray, need_color: bool = True):
    """Occupancy (m,), colour (m, 3) or None, and the cache for ``field_backward``."""
    emb, geo_lookups = encode_batch(model.geo_grid, xs)
    occ, geo_acts = model.geo_mlp.forward(emb)
    col, col_lookups, col_acts = None, None, None
    if need_color:
        cemb, col_lookups = encode_batch(model.col_grid, xs)
        col, col_acts = model.col_mlp.forward(cemb)
    return occ[:, 0], col, FieldCache(geo_lookups, geo_acts, col_lookups, col_acts)


def field_backward(model: ObjectModel, cache: FieldCache, d_occ, d_col, buf: GradientBuffer) -> None:
    """Accumulate parameter gradients; frozen groups receive nothing."""
    for name, d_out, lookups, acts in (("geo", d_occ, cache.geo_lookups, cache.geo_acts),
                                       ("col", d_col, cache.col_lookups, cache.col_acts)):
        if d_out is None or acts is None:
            continue
        grid_frozen = f"{name}_grid" in model.frozen
        mlp_frozen = f"{name}_mlp" in model.frozen
        if grid_frozen and mlp_frozen:
            continue
        mlp: TinyMLP = getattr(model, f"{name}_mlp")
        d_out = np.asarray(d_out, dtype=acts[-1].dtype).reshape(acts[-1].shape)
        n = len(mlp.weights)
        gw = None if mlp_frozen else buf._group(f"{name}_mlp", n, "W")
        gb = None if mlp_frozen else buf._group(f"{name}_mlp", n, "b")
        d_emb = mlp.backward(acts, d_out, gw, gb)
        if not grid_frozen:
            grid: FeatureGrid = getattr(model, f"{name}_grid")
            grid_backward(grid, lookups, d_emb, buf._group(f"{name}_grid", grid.config.L, ""))


def decode_occupancy(model: ObjectModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    emb, _ = encode_batch(model.geo_grid, x)
    occ, _ = model.geo_mlp.forward(emb)
    return occ[0, 0] if x.ndim == 1 else occ[:, 0]


def decode_color(model: ObjectModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    emb, _ = encode_batch(model.col_grid, x)
    col, _ = model.col_mlp.forward(emb)
    return col[0] if x.ndim == 1 else col


def evaluate_with_gradients(model: ObjectModel, xs, upstream, buf: GradientBuffer):
    """Forward both heads and accumulate ``upstream``-weighted parameter gradients.

    ``upstream`` is ``(d_occupancy (m,), d_color (m, 3))``; either may be None.
    """
    buf.check(model)
    xs = np.asarray(xs).reshape(-1, 3)
    d_occ, d_col = upstream
    occ, col, cache = field_forward(model, xs)
    if d_occ is not None and np.shape(d_occ) != occ.shape:
        raise ValueError("occupancy adjoint shape mismatch")
    if d_col is not None and np.shape(d_col) != col.shape:
        raise ValueError("colour adjoint shape mismatch")
    field_backward(model, cache, d_occ, d_col, buf)
    return occ, col


def vertex_coords(n: int) -> np.ndarray:
    """Unit-cube coordinates of an n^3 vertex lattice in flat-index order."""
    t = np.arange(n) / (n - 1)
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def reinterpolate_grid(old: FeatureGrid, delta: np.ndarray, rng: np.random.Generator,
                       config: Optional[GridConfig] = None) -> FeatureGrid:
    """Resample ``old`` onto a new box; ``delta`` maps new unit coords to old unit coords.

    Vertices whose image leaves the old unit cube get fresh random features.
    """
    config = config or old.config
    delta = np.asarray(delta, dtype=np.float64)
    dtype = old.levels[0].dtype
    if config == old.config and np.array_equal(delta, np.eye(4)):
        return old.copy()
    levels = []
    for l, n in enumerate(config.sizes):
        v = vertex_coords(n)
        mapped = v @ delta[:3, :3].T + delta[:3, 3]
        r = np.rint(mapped)
        mapped = np.where(np.abs(mapped - r) < 1e-9, r, mapped)
        inside = np.all((mapped >= 0.0) & (mapped <= 1.0), axis=1)
        feats = rng.uniform(-GRID_INIT_SCALE, GRID_INIT_SCALE, n ** 3).astype(dtype)
        if np.any(inside):
            idx, w = _cell_lookup(old.config.sizes[l], mapped[inside])
            feats[inside] = np.einsum("mc,mc->m", old.levels[l][idx], w).astype(dtype)
        levels.append(feats)
    return FeatureGrid(config, levels)
