import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objrecon.core import BoxTransform, Frame, Intrinsics, Pose
from objrecon.field import GridConfig, ObjectModel
from objrecon.io import (Dataset, FormatError, load_model, read_intrinsics, read_poses, save_model,
                         write_dataset, write_intrinsics, write_poses)
from objrecon.render import AdamWState
from objrecon.synthdata import Primitive, TrajectorySpec, generate_trajectory, raycast_frame

from conftest import INVARIANT_CASES, small_intrinsics


def random_model(seed, dtype=np.float32, with_opt=True, frozen=()):
    rng = np.random.default_rng(seed)
    box = BoxTransform(rng.uniform(0.05, 0.3, 3), rng.normal(size=3))
    m = ObjectModel.create(box, rng, GridConfig(2, 3, 1.5), hidden=5, dtype=dtype)
    for p in m.parameters().values():
        p[...] = rng.normal(size=p.shape) * 10.0 ** rng.integers(-8, 3)
    m.frozen = set(frozen)
    if with_opt:
        st_ = AdamWState(float(rng.random()), float(rng.random()), 0.1, (0.9, 0.999), 1e-8, int(rng.integers(0, 1000)))
        for k, p in m.parameters().items():
            if rng.random() < 0.7:
                st_.m[k] = rng.normal(size=p.shape).astype(dtype)
                st_.v[k] = rng.random(p.shape).astype(dtype)
        m.optimizer_state = st_
    return m


def assert_models_equal(a, b):
    pa, pb = a.parameters(), b.parameters()
    assert pa.keys() == pb.keys()
    for k in pa:
        assert pa[k].dtype == pb[k].dtype and np.array_equal(pa[k], pb[k]), k
    assert np.array_equal(a.box.matrix(), b.box.matrix())
    assert a.frozen == b.frozen
    sa, sb = a.optimizer_state, b.optimizer_state
    assert (sa is None) == (sb is None)
    if sa is not None:
        assert (sa.lr_grid, sa.lr_mlp, sa.weight_decay, tuple(sa.betas), sa.eps, sa.step) == \
            (sb.lr_grid, sb.lr_mlp, sb.weight_decay, tuple(sb.betas), sb.eps, sb.step)
        assert sa.m.keys() == sb.m.keys() and sa.v.keys() == sb.v.keys()
        for k in sa.m:
            assert np.array_equal(sa.m[k], sb.m[k]) and np.array_equal(sa.v[k], sb.v[k])


@settings(max_examples=INVARIANT_CASES)
@given(st.integers(0, 2 ** 32 - 1), st.booleans(), st.sampled_from([np.float32, np.float64]),
       st.sets(st.sampled_from(["geo_grid", "geo_mlp", "col_grid", "col_mlp"])))
def test_archive_round_trip_bit_exact(seed, with_opt, dtype, frozen):
    m = random_model(seed, dtype, with_opt, frozen)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.objrecon"
        save_model(path, m)
        assert_models_equal(m, load_model(path))


def test_archive_default_model_and_without_optimizer(tmp_path):
    m = ObjectModel.create(BoxTransform([0.1] * 3, [0, 0, 0]), np.random.default_rng(0))
    m.optimizer_state = AdamWState()
    save_model(tmp_path / "a", m, with_optimizer=False)
    back = load_model(tmp_path / "a")
    assert back.optimizer_state is None
    assert all(np.array_equal(x, y) for x, y in zip(m.parameters().values(), back.parameters().values()))
    assert back.dtype == np.float32


def test_archive_layout_is_little_endian(tmp_path):
    m = random_model(1, with_opt=False)
    save_model(tmp_path / "a", m)
    raw = (tmp_path / "a").read_bytes()
    magic, header, blob = raw.split(b"\n", 2)
    assert magic == b"OBJRECON-ARCHIVE 1"
    first = next(iter(m.parameters().values()))
    assert blob[:first.nbytes] == first.astype("<f4").tobytes()


@pytest.mark.parametrize("mutate, message", [
    (lambda raw: b"NOT-AN-ARCHIVE\n" + raw, "not a model archive"),
    (lambda raw: raw.replace(b"OBJRECON-ARCHIVE 1", b"OBJRECON-ARCHIVE 9", 1), "version"),
    (lambda raw: raw[:-4], "truncated"),
    (lambda raw: raw + b"xxxx", "trailing"),
    (lambda raw: raw.split(b"\n", 1)[0] + b"\n{broken\n", "corrupt header"),
])
def test_malformed_archive_names_path(tmp_path, mutate, message):
    path = tmp_path / "bad.objrecon"
    save_model(path, random_model(2))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as exc:
        load_model(path)
    assert str(path) in str(exc.value) and message in str(exc.value)


# ---------------------------------------------------------------- dataset layout

def test_intrinsics_and_poses_round_trip(tmp_path):
    K = Intrinsics(525.5, 524.25, 319.5, 239.5, 640, 480, 5000.0)
    write_intrinsics(tmp_path / "k.txt", K)
    assert read_intrinsics(tmp_path / "k.txt") == K
    poses = {i: p for i, p in enumerate(generate_trajectory(TrajectorySpec(n_frames=5)))}
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    assert sorted(back) == list(range(5))
    assert all(np.array_equal(back[i].matrix(), poses[i].matrix()) for i in poses)


def test_intrinsics_and_poses_errors(tmp_path):
    (tmp_path / "k.txt").write_text("1 2 3\n")
    with pytest.raises(FormatError, match="k.txt"):
        read_intrinsics(tmp_path / "k.txt")
    (tmp_path / "p.txt").write_text("0 " + " ".join(["1"] * 15) + "\n")
    with pytest.raises(FormatError, match=r"p.txt:1"):
        read_poses(tmp_path / "p.txt")


def sphere_frames(n=3):
    K = small_intrinsics(32, 24, 30.0)
    prims = [Primitive.at("sphere", (0.05,), (0, 0, 0), instance_id=3, category=7, albedo=(0.2, 0.6, 0.9))]
    return [raycast_frame(prims, p, K, i) for i, p in
            enumerate(generate_trajectory(TrajectorySpec(radius=0.3, n_frames=n)))]


def test_dataset_round_trip(tmp_path):
    frames = sphere_frames()
    write_dataset(tmp_path, frames)
    ds = Dataset(tmp_path)
    assert len(ds) == 3 and ds.categories == {3: 7}
    for f, g in zip(frames, ds):
        assert g.index == f.index and g.categories == {3: 7}
        assert np.array_equal(g.masks, f.masks)
        # 8-bit colour and millimetre depth quantisation
        assert np.abs(g.color - f.color).max() <= 0.5 / 255 + 1e-6
        assert np.abs(g.depth - f.depth).max() <= 0.5e-3 + 1e-6
        assert np.array_equal(g.pose.matrix(), f.pose.matrix())


def test_dataset_errors(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        Dataset(tmp_path / "nope")
    frames = sphere_frames(2)
    write_dataset(tmp_path, frames)
    (tmp_path / "poses.txt").write_text((tmp_path / "poses.txt").read_text().splitlines()[0] + "\n")
    with pytest.raises(FormatError, match="no pose for frame 1"):
        Dataset(tmp_path)
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "empty", [])


def test_dataset_shape_mismatch_names_file(tmp_path):
    write_dataset(tmp_path, sphere_frames(1))
    from PIL import Image
    Image.fromarray(np.zeros((5, 5), np.uint16)).save(tmp_path / "frame_000000.depth.png")
    with pytest.raises(FormatError, match="frame_000000.depth.png"):
        Dataset(tmp_path).frame(0)


def test_dataset_unreadable_image_names_file(tmp_path):
    write_dataset(tmp_path, sphere_frames(1))
    (tmp_path / "frame_000000.mask.png").write_bytes(b"garbage")
    with pytest.raises(FormatError, match="frame_000000.mask.png"):
        list(Dataset(tmp_path))


def test_missing_index_file(tmp_path):
    write_dataset(tmp_path, sphere_frames(1))
    (tmp_path / "intrinsics.txt").unlink()
    with pytest.raises(FormatError, match="intrinsics.txt"):
        Dataset(tmp_path)
