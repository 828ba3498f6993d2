import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from objrecon.core import BoxTransform
from objrecon.field import (FeatureGrid, GradientBuffer, GridConfig, ObjectModel, TinyMLP, decode_color,
                            decode_occupancy, encode, evaluate_with_gradients, reinterpolate_grid)

from conftest import INVARIANT_CASES

BOX = BoxTransform([0.2, 0.2, 0.2], [0.0, 0.0, 0.0])
unit = arrays(np.float64, 3, elements=st.floats(0, 1))


def model64(seed=0, cfg=GridConfig(2, 4, 1.5)):
    rng = np.random.default_rng(seed)
    m = ObjectModel.create(BOX, rng, cfg, hidden=8, dtype=np.float64)
    # features large enough that the MLP sees varied inputs
    for g in (m.geo_grid, m.col_grid):
        for lv in g.levels:
            lv[:] = rng.normal(0, 1, lv.size)
    return m


# ---------------------------------------------------------------- oracle forward pass

def trilinear_oracle(grid, x):
    out = []
    for l, n in enumerate(grid.config.sizes):
        a = grid.level_array(l)
        u = np.clip(x, 0, 1) * (n - 1)
        i = np.minimum(np.floor(u).astype(int), n - 2)
        f = u - i
        v = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                    v += w * a[i[0] + dx, i[1] + dy, i[2] + dz]
        out.append(v)
    return np.array(out)


def mlp_oracle(mlp, h):
    for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = [sum(h[i] * W[i, j] for i in range(len(h))) + b[j] for j in range(W.shape[1])]
        if k < len(mlp.weights) - 1:
            h = [max(v, 0.0) for v in z]
        else:
            h = [1.0 / (1.0 + np.exp(-v)) for v in z]
    return np.array(h)


# ---------------------------------------------------------------- grid config

def test_default_grid_sizes_and_count():
    cfg = GridConfig()
    assert cfg.sizes == (16, 24, 36)
    assert cfg.n_params == 16 ** 3 + 24 ** 3 + 36 ** 3 == 64576
    assert FeatureGrid.random(cfg, np.random.default_rng(0)).n_params == 64576


@pytest.mark.parametrize("kw", [dict(L=0), dict(N0=1), dict(gamma=1.0)])
def test_grid_config_validation(kw):
    with pytest.raises(ValueError):
        GridConfig(**kw)


def test_grid_init_range():
    g = FeatureGrid.random(GridConfig(), np.random.default_rng(1))
    assert all(np.all(np.abs(lv) <= 1e-4) for lv in g.levels)


# ---------------------------------------------------------------- encode

def test_encode_on_vertex_returns_stored_scalar():
    cfg = GridConfig(2, 3, 2.0)  # sizes 3 and 6
    g = FeatureGrid.random(cfg, np.random.default_rng(0), np.float64)
    x = np.array([0.5, 0.0, 1.0])  # vertex (1, 0, 2) at level 0 and (2.5 -> not) at level 1
    e = encode(g, x)
    assert e[0] == g.level_array(0)[1, 0, 2]
    x = np.array([0.2, 0.4, 1.0])  # vertex of the 6-grid: (1, 2, 5)
    assert encode(g, x)[1] == g.level_array(1)[1, 2, 5]


@given(st.floats(-5, 5), unit)
def test_encode_constant_field(c, x):
    g = FeatureGrid.constant(GridConfig(), c, np.float64)
    assert np.allclose(encode(g, x), c, atol=1e-12)


def test_encode_single_corner_at_cell_center():
    cfg = GridConfig(1, 2, 1.5)
    g = FeatureGrid.constant(cfg, 0.0, np.float64)
    g.level_array(0)[1, 0, 1] = 1.0
    assert encode(g, [0.5, 0.5, 0.5])[0] == pytest.approx(0.125)


@settings(max_examples=300)
@given(unit, st.integers(0, 1000))
def test_encode_matches_oracle(x, seed):
    g = FeatureGrid.random(GridConfig(), np.random.default_rng(seed), np.float64)
    assert np.allclose(encode(g, x), trilinear_oracle(g, x), atol=1e-15)


def test_encode_clamps_outside_points():
    g = FeatureGrid.random(GridConfig(), np.random.default_rng(0), np.float64)
    assert np.array_equal(encode(g, [1.7, -0.3, 0.5]), encode(g, [1.0, 0.0, 0.5]))


@settings(max_examples=INVARIANT_CASES)
@given(unit, st.integers(0, 2), st.integers(0, 36 ** 3 - 1))
def test_encode_locality(x, level, flat):
    cfg = GridConfig()
    g = FeatureGrid.random(cfg, np.random.default_rng(0), np.float64)
    n = cfg.sizes[level]
    flat %= n ** 3
    i = np.array(np.unravel_index(flat, (n, n, n)))
    u = np.clip(x, 0, 1) * (n - 1)
    cell = np.minimum(np.floor(u), n - 2)
    touched = np.all((i >= cell) & (i <= cell + 1))
    before = encode(g, x)
    g.levels[level][flat] += 1.0
    after = encode(g, x)
    others = [k for k in range(cfg.L) if k != level]
    assert np.array_equal(before[others], after[others])
    if not touched:
        assert np.array_equal(before, after)


# ---------------------------------------------------------------- decoders

def test_zero_mlps_give_half():
    m = model64()
    for mlp in (m.geo_mlp, m.col_mlp):
        for W, b in zip(mlp.weights, mlp.biases):
            W[:] = 0
            b[:] = 0
    x = np.random.default_rng(0).uniform(0, 1, (10, 3))
    assert np.allclose(decode_occupancy(m, x), 0.5)
    assert np.allclose(decode_color(m, x), 0.5)


def test_large_bias_saturates():
    m = model64()
    m.geo_mlp.weights[-1][:] = 0
    m.geo_mlp.biases[-1][:] = 20.0
    assert decode_occupancy(m, [0.3, 0.3, 0.3]) > 0.999


@settings(max_examples=50)
@given(unit, st.integers(0, 1000))
def test_decoders_match_oracle(x, seed):
    m = model64(seed)
    assert decode_occupancy(m, x) == pytest.approx(mlp_oracle(m.geo_mlp, trilinear_oracle(m.geo_grid, x))[0],
                                                   abs=1e-12)
    assert np.allclose(decode_color(m, x), mlp_oracle(m.col_mlp, trilinear_oracle(m.col_grid, x)), atol=1e-12)


def test_default_model_shapes_and_ranges():
    m = ObjectModel.create(BOX, np.random.default_rng(0))
    assert m.geo_mlp.sizes == [3, 64, 1] and m.col_mlp.sizes == [3, 64, 64, 3]
    x = np.random.default_rng(1).uniform(0, 1, (100, 3))
    o, c = decode_occupancy(m, x), decode_color(m, x)
    assert np.all((o > 0) & (o < 1)) and np.all((c > 0) & (c < 1))


def test_freeze_rejects_unknown_group():
    with pytest.raises(KeyError):
        model64().freeze("encoder")


# ---------------------------------------------------------------- gradients

def scalar_loss(m, xs, a, b):
    return float(decode_occupancy(m, xs) @ a + np.sum(decode_color(m, xs) * b))


@settings(max_examples=60)
@given(st.integers(0, 10**6))
def test_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    m = model64(seed % 97)
    xs = r.uniform(0, 1, (6, 3))
    a, b = r.normal(size=6), r.normal(size=(6, 3))
    buf = GradientBuffer(m)
    evaluate_with_gradients(m, xs, (a, b), buf)
    params = m.parameters()
    h = 1e-4
    for name in r.choice(sorted(params), 4, replace=False):
        p = params[name]
        g = buf[name]
        # probe the entry with the largest gradient plus a random one
        for j in {int(np.argmax(np.abs(g))), int(r.integers(p.size))}:
            old = p.flat[j]
            p.flat[j] = old + h
            lp = scalar_loss(m, xs, a, b)
            p.flat[j] = old - h
            lm = scalar_loss(m, xs, a, b)
            p.flat[j] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g.flat[j]) <= 1e-4 * max(abs(fd), abs(g.flat[j]), 1e-6) + 1e-9, name


def test_zero_upstream_leaves_buffer_unchanged():
    m = model64()
    buf = GradientBuffer(m)
    evaluate_with_gradients(m, np.full((3, 3), 0.4), (np.zeros(3), np.zeros((3, 3))), buf)
    assert all(not np.any(g) for _, g in buf.items())


def test_frozen_groups_get_no_gradient():
    m = model64()
    m.freeze("geo_grid", "geo_mlp")
    buf = GradientBuffer(m)
    evaluate_with_gradients(m, np.full((3, 3), 0.4), (np.ones(3), np.ones((3, 3))), buf)
    for k, g in buf.items():
        assert (not np.any(g)) == k.startswith("geo")


def test_gradient_buffer_shape_mismatch():
    buf = GradientBuffer(model64())
    other = model64(cfg=GridConfig(2, 5, 1.5))
    with pytest.raises(ValueError):
        evaluate_with_gradients(other, np.zeros((1, 3)), (np.ones(1), None), buf)
    with pytest.raises(ValueError):
        evaluate_with_gradients(model64(), np.zeros((2, 3)), (np.ones(3), None), GradientBuffer(model64()))


# ---------------------------------------------------------------- reinterpolation

def test_reinterpolate_identity_is_exact():
    g = FeatureGrid.random(GridConfig(), np.random.default_rng(0))
    out = reinterpolate_grid(g, np.eye(4), np.random.default_rng(1))
    assert all(np.array_equal(a, b) for a, b in zip(g.levels, out.levels))


def test_reinterpolate_doubled_box():
    g = FeatureGrid.random(GridConfig(), np.random.default_rng(0), np.float64)
    for lv in g.levels:
        lv[:] = np.random.default_rng(2).normal(size=lv.size)
    old = BoxTransform([1, 1, 1], [0, 0, 0])
    new = BoxTransform([2, 2, 2], [0, 0, 0])
    delta = np.linalg.inv(old.matrix()) @ new.matrix()
    out = reinterpolate_grid(g, delta, np.random.default_rng(1))
    for l, n in enumerate(g.config.sizes):
        t = np.arange(n) / (n - 1)
        v = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
        mapped = v * 2 - 0.5
        inside = np.all((mapped >= 0) & (mapped <= 1), axis=1)
        expect = np.array([trilinear_oracle(g, p)[l] for p in mapped[inside]])
        assert np.allclose(out.levels[l][inside], expect, atol=1e-7)
        assert np.all(np.abs(out.levels[l][~inside]) <= 1e-4)


def test_reinterpolate_constant_grid():
    g = FeatureGrid.constant(GridConfig(), 0.25, np.float64)
    delta = np.diag([1.5, 1.5, 1.5, 1.0])
    delta[:3, 3] = -0.25
    out = reinterpolate_grid(g, delta, np.random.default_rng(0))
    for l, n in enumerate(g.config.sizes):
        t = np.arange(n) / (n - 1)
        v = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3) * 1.5 - 0.25
        inside = np.all((v >= 0) & (v <= 1), axis=1)
        assert np.allclose(out.levels[l][inside], 0.25, atol=1e-15)
