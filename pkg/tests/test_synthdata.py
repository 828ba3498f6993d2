import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objrecon.core import Pose, backproject, look_at
from objrecon.meshmetrics import accuracy
from objrecon.synthdata import (Primitive, SceneSpec, TrajectorySpec, default_intrinsics, generate_trajectory,
                                ground_truth_mesh, raycast_frame, render_sequence)

from conftest import small_intrinsics

K = small_intrinsics(64, 48, 50.0)


def exact_intrinsics():
    from objrecon.core import Intrinsics
    return Intrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)


def test_center_pixel_depth_is_exact():
    K0 = exact_intrinsics()
    s = Primitive.at("sphere", (0.07,), (0.1, 0.2, 0.3))
    f = raycast_frame([s], look_at((0.1, 0.2 - 0.9, 0.3), (0.1, 0.2, 0.3)), K0)
    assert f.depth[24, 32] == pytest.approx(0.9 - 0.07, abs=1e-12)
    assert f.masks[24, 32] == 1


def test_empty_scene():
    f = raycast_frame([], look_at((0, -1, 0), (0, 0, 0)), K)
    assert not f.depth.any() and not f.masks.any()


def test_occlusion_matches_supersampled_oracle():
    sphere = Primitive.at("sphere", (0.1,), (0, 0, 0), instance_id=1)
    box = Primitive.at("box", (0.08, 0.05, 0.08), (0.03, -0.2, 0.0), instance_id=2)
    pose = look_at((0, -0.8, 0), (0, 0, 0))
    f = raycast_frame([sphere, box], pose, K)
    from objrecon.core import Intrinsics
    s = 4
    # sub-pixel (s*u + i, s*v + j) centres map to offsets (i + 0.5)/s - 0.5 within pixel (u, v)
    K4 = Intrinsics(K.fx * s, K.fy * s, (K.cx + 0.5) * s - 0.5, (K.cy + 0.5) * s - 0.5, K.width * s, K.height * s)
    hi = raycast_frame([sphere, box], pose, K4).masks.reshape(K.height, s, K.width, s).transpose(0, 2, 1, 3)
    hi = hi.reshape(K.height, K.width, s * s)
    pure = np.all(hi == hi[..., :1], axis=-1)
    assert pure.sum() > 0.8 * pure.size
    assert np.array_equal(f.masks[pure], hi[..., 0][pure])
    # the box covers part of the sphere: there, only the box id appears
    covered = pure & (hi[..., 0] == 2)
    assert covered.any() and np.all(f.masks[covered] == 2)


@pytest.mark.parametrize("prim", [
    Primitive.at("sphere", (0.05,), (0.02, 0.0, 0.01)),
    Primitive.at("box", (0.1, 0.06, 0.04), (0.0, 0.02, 0.0)),
    Primitive("cylinder", (0.03, 0.08), Pose(look_at((0, 0, 0), (1, 1, 1)).rotation, (0.0, 0.0, 0.02))),
])
def test_depth_and_mask_consistency(prim):
    f = raycast_frame([prim], look_at((0.2, -0.4, 0.25), (0, 0, 0)), K)
    assert np.all(f.depth[f.masks > 0] > 0) and np.all(f.depth[f.masks == 0] == 0)
    pts = backproject(f, prim.instance_id).points
    local = (pts - prim.pose.translation) @ prim.pose.rotation
    if prim.kind == "sphere":
        err = np.abs(np.linalg.norm(local, axis=1) - prim.size[0])
    elif prim.kind == "box":
        err = np.min(np.abs(np.abs(local) - np.asarray(prim.size) / 2), axis=1)
    else:
        r, h = prim.size
        err = np.minimum(np.abs(np.hypot(local[:, 0], local[:, 1]) - r), np.abs(np.abs(local[:, 2]) - h / 2))
    assert err.max() < 1e-6


def test_determinism_and_noise():
    s = [Primitive.at("sphere", (0.05,), (0, 0, 0))]
    poses = generate_trajectory(TrajectorySpec(n_frames=3, radius=0.4))
    a = render_sequence(s, poses, K, depth_noise=0.002, seed=4)
    b = render_sequence(s, poses, K, depth_noise=0.002, seed=4)
    c = render_sequence(s, poses, K)
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x.depth, y.depth) and np.array_equal(x.color, y.color)
        hit = z.masks > 0
        assert 0.0005 < np.std(x.depth[hit] - z.depth[hit]) < 0.004


def test_colors_are_8bit_quantized():
    f = raycast_frame([Primitive.at("sphere", (0.05,), (0, 0, 0))], look_at((0, -0.3, 0), (0, 0, 0)), K)
    assert np.allclose(f.color * 255, np.rint(f.color * 255), atol=1e-9)


# ---------------------------------------------------------------- trajectories

def test_orbit_conventions():
    n = 12
    poses = generate_trajectory(TrajectorySpec("orbit", center=(1, 2, 3), radius=0.5, n_frames=n))
    assert np.allclose(poses[0].translation, [1.5, 2, 3])
    ang = [np.arctan2(p.translation[1] - 2, p.translation[0] - 1) for p in poses]
    assert np.allclose(np.diff(np.unwrap(ang)), 2 * np.pi / n)


@settings(max_examples=100)
@given(st.sampled_from(["orbit", "hemisphere", "linear"]), st.integers(1, 30), st.integers(0, 3))
def test_trajectory_look_at(kind, n, wave):
    spec = TrajectorySpec(kind, center=(0.1, 0, 0), radius=0.7, n_frames=n, height=0.2, height_wave=wave,
                          target=(0.0, 0.1, 0.0), end=(1.0, 1.0, 0.5))
    for p in generate_trajectory(spec):
        d = np.array([0.0, 0.1, 0.0]) - p.translation
        cosang = np.dot(p.rotation[:, 2], d / np.linalg.norm(d))
        assert np.arccos(np.clip(cosang, -1, 1)) < 1e-6


def test_height_wave_passes_below():
    poses = generate_trajectory(TrajectorySpec(radius=0.6, n_frames=100, height=0.25, height_wave=2))
    z = np.array([p.translation[2] for p in poses])
    assert z.max() == pytest.approx(0.25) and z.min() == pytest.approx(-0.25, abs=1e-3)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(n_frames=0)
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")
    with pytest.raises(ValueError):
        TrajectorySpec(radius=0.0)


# ---------------------------------------------------------------- ground truth

def test_sphere_mesh_radii():
    m = ground_truth_mesh(Primitive.at("sphere", (0.05,), (0.1, 0, 0)), 0.003)
    assert np.allclose(np.linalg.norm(m.vertices - [0.1, 0, 0], axis=1), 0.05, atol=1e-9)
    assert m.boundary_edges() == 0


def test_box_mesh_area():
    m = ground_truth_mesh(Primitive.at("box", (0.1, 0.2, 0.3), (0, 0, 0)), 0.01)
    assert m.area() == pytest.approx(2 * (0.1 * 0.2 + 0.2 * 0.3 + 0.1 * 0.3), rel=1e-6)
    assert m.boundary_edges() == 0


def test_cylinder_mesh_close_to_analytic_area():
    r, h = 0.04, 0.1
    m = ground_truth_mesh(Primitive.at("cylinder", (r, h), (0, 0, 0)), 0.002)
    assert m.area() == pytest.approx(2 * np.pi * r * h + 2 * np.pi * r * r, rel=5e-3)
    assert m.boundary_edges() == 0


def test_gt_self_accuracy_zero():
    m = ground_truth_mesh(Primitive.at("sphere", (0.05,), (0, 0, 0)), 0.005)
    assert accuracy(m, m) == 0.0


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive.at("cone", (1,), (0, 0, 0))
    with pytest.raises(ValueError):
        Primitive.at("box", (1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        ground_truth_mesh(Primitive.at("sphere", (1,), (0, 0, 0)), 0.0)


# ---------------------------------------------------------------- scene spec

def test_scene_spec_from_dict():
    spec = SceneSpec.from_dict({
        "primitives": [{"kind": "sphere", "size": [0.05], "center": [0.12, 0, 0], "albedo": [0.9, 0.2, 0.2],
                        "instance_id": 1, "category": 3},
                       {"kind": "box", "size": [0.1, 0.1, 0.1], "center": [-0.12, 0, 0], "instance_id": 2,
                        "rotation_deg": [0, 0, 30]}],
        "trajectory": {"kind": "orbit", "radius": 0.6, "n_frames": 2, "height": 0.25},
        "intrinsics": {"width": 64, "height": 48, "fov_deg": 60},
    })
    assert spec.primitives[0].category == 3 and spec.intrinsics.width == 64
    frames = spec.render()
    assert len(frames) == 2 and set(frames[0].instance_ids()) <= {1, 2}
    assert set(spec.ground_truth(0.01)) == {1, 2}
    assert default_intrinsics().width == 640


@pytest.mark.parametrize("bad", [
    {"primitives": []},
    {"primitives": [{"kind": "cone", "size": [1]}]},
    {"primitives": [{"kind": "sphere", "size": [0.1]}], "camera": {}},
    {"primitives": [{"kind": "sphere", "size": [0.1], "instance_id": 0}]},
    {"primitives": [{"kind": "sphere", "size": [0.1]}], "trajectory": {"spin": 3}},
])
def test_scene_spec_errors(bad):
    with pytest.raises(ValueError):
        SceneSpec.from_dict(bad)
