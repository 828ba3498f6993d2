"""On-disk formats: model archives and the RGB-D dataset directory layout."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .core import BoxTransform, Frame, Intrinsics, Pose
from .field import FeatureGrid, GridConfig, ObjectModel, TinyMLP
from .render import AdamWState

MAGIC = "OBJRECON-ARCHIVE"
VERSION = 1


class FormatError(ValueError):
    """Malformed file; the message names the offending path."""


# ---------------------------------------------------------------- model archive

def _tensors(model: ObjectModel, with_optimizer: bool) -> list[tuple[str, np.ndarray]]:
    out = list(model.parameters().items())
    st = model.optimizer_state
    if with_optimizer and st is not None:
        for k in sorted(st.m):
            out.append((f"opt.m.{k}", st.m[k]))
            out.append((f"opt.v.{k}", st.v[k]))
    return out


def save_model(path, model: ObjectModel, with_optimizer: bool = True) -> None:
    """Text header line (JSON) followed by the raw little-endian tensors in header order."""
    dtype = np.dtype(model.dtype).newbyteorder("<")
    tensors = _tensors(model, with_optimizer)
    st = model.optimizer_state
    header = {
        "version": VERSION,
        "dtype": dtype.str,
        "grid": {"L": model.config.L, "N0": model.config.N0, "gamma": model.config.gamma},
        "mlp": {"geo": model.geo_mlp.sizes, "col": model.col_mlp.sizes},
        "box": {"extent": model.box.extent.tolist(), "center": model.box.center.tolist(),
                "rotation": model.box.rotation.tolist()},
        "frozen": sorted(model.frozen),
        "optimizer": None if not (with_optimizer and st is not None) else {
            "lr_grid": st.lr_grid, "lr_mlp": st.lr_mlp, "weight_decay": st.weight_decay,
            "betas": list(st.betas), "eps": st.eps, "step": st.step},
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n".encode())
        fh.write(json.dumps(header).encode() + b"\n")
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def load_model(path) -> ObjectModel:
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise FormatError(f"{path}: not a model archive")
        if int(first[1]) != VERSION:
            raise FormatError(f"{path}: unsupported archive version {first[1]}")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt header: {exc}") from exc
        blob = fh.read()
    dtype = np.dtype(header["dtype"])
    arrays, off = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * dtype.itemsize
        if off + n > len(blob):
            raise FormatError(f"{path}: tensor {name!r} truncated")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        arrays[name] = arrays[name].astype(dtype.newbyteorder("="))
        off += n
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    cfg = GridConfig(**header["grid"])

    def grid(prefix):
        return FeatureGrid(cfg, [arrays[f"{prefix}.{l}"] for l in range(cfg.L)])

    def mlp(prefix, sizes):
        k = len(sizes) - 1
        return TinyMLP([arrays[f"{prefix}.W{i}"] for i in range(k)], [arrays[f"{prefix}.b{i}"] for i in range(k)])

    b = header["box"]
    box = BoxTransform(np.array(b["extent"]), np.array(b["center"]), np.array(b["rotation"]))
    try:
        model = ObjectModel(grid("geo_grid"), grid("col_grid"), mlp("geo_mlp", header["mlp"]["geo"]),
                            mlp("col_mlp", header["mlp"]["col"]), box, set(header["frozen"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from exc
    opt = header.get("optimizer")
    if opt is not None:
        st = AdamWState(opt["lr_grid"], opt["lr_mlp"], opt["weight_decay"], tuple(opt["betas"]), opt["eps"],
                        opt["step"])
        for name in arrays:
            if name.startswith("opt.m."):
                k = name[len("opt.m."):]
                st.m[k] = arrays[name]
                st.v[k] = arrays[f"opt.v.{k}"]
        model.optimizer_state = st
    return model


# ---------------------------------------------------------------- dataset layout

_FRAME_RE = re.compile(r"^frame_(\d{6})\.color\.png$")


def write_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height} {K.depth_scale!r}\n")


def read_intrinsics(path) -> Intrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 7:
        raise FormatError(f"{path}: expected 7 values (fx fy cx cy width height depth_scale)")
    try:
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        return Intrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]), float(vals[6]))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_poses(path, poses: dict) -> None:
    lines = []
    for idx in sorted(poses):
        m = poses[idx].matrix().ravel()
        lines.append(f"{idx} " + " ".join(repr(float(x)) for x in m))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict:
    poses = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 17:
            raise FormatError(f"{path}:{ln}: expected frame index and 16 values")
        try:
            poses[int(vals[0])] = Pose.from_matrix(np.array(vals[1:], dtype=np.float64).reshape(4, 4))
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from exc
    return poses


def write_frame(root, frame: Frame) -> None:
    root = Path(root)
    stem = root / f"frame_{frame.index:06d}"
    color = np.clip(np.round(frame.color * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(color, mode="RGB").save(f"{stem}.color.png")
    depth = np.clip(np.round(frame.depth * frame.intrinsics.depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(f"{stem}.depth.png")
    if frame.masks.max(initial=0) > 65535:
        raise ValueError("instance ids must fit in 16 bits")
    Image.fromarray(frame.masks.astype(np.uint16)).save(f"{stem}.mask.png")


def write_dataset(root, frames, categories: Optional[dict] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to write")
    for f in frames:
        write_frame(root, f)
    write_poses(root / "poses.txt", {f.index: f.pose for f in frames})
    write_intrinsics(root / "intrinsics.txt", frames[0].intrinsics)
    cats = dict(categories or {})
    for f in frames:
        cats.update(f.categories)
    if cats:
        (root / "categories.txt").write_text("".join(f"{k} {v}\n" for k, v in sorted(cats.items())))


def _read_png(path, what: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read {what} image: {exc}") from exc


class Dataset:
    """Lazy reader over a dataset directory; iterating yields frames in index order."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FormatError(f"{self.root}: dataset directory not found")
        for name in ("poses.txt", "intrinsics.txt"):
            if not (self.root / name).is_file():
                raise FormatError(f"{self.root / name}: missing")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        self.poses = read_poses(self.root / "poses.txt")
        self.categories = {}
        cat = self.root / "categories.txt"
        if cat.is_file():
            for ln, line in enumerate(cat.read_text().splitlines(), 1):
                if line.strip():
                    try:
                        k, v = line.split()
                        self.categories[int(k)] = int(v)
                    except ValueError as exc:
                        raise FormatError(f"{cat}:{ln}: expected 'instance category'") from exc
        self.indices = sorted(int(m.group(1)) for p in self.root.iterdir() if (m := _FRAME_RE.match(p.name)))
        if not self.indices:
            raise FormatError(f"{self.root}: no frame_*.color.png files")
        for i in self.indices:
            if i not in self.poses:
                raise FormatError(f"{self.root / 'poses.txt'}: no pose for frame {i}")

    def __len__(self) -> int:
        return len(self.indices)

    def frame(self, index: int) -> Frame:
        stem = self.root / f"frame_{index:06d}"
        color = _read_png(f"{stem}.color.png", "color")
        depth = _read_png(f"{stem}.depth.png", "depth")
        mask = _read_png(f"{stem}.mask.png", "mask")
        K = self.intrinsics
        for arr, what in ((color, "color"), (depth, "depth"), (mask, "mask")):
            if arr.shape[:2] != (K.height, K.width):
                raise FormatError(f"{stem}.{what}.png: shape {arr.shape[:2]} does not match intrinsics")
        if color.ndim != 3 or color.shape[2] < 3:
            raise FormatError(f"{stem}.color.png: expected RGB")
        ids = set(np.unique(mask).tolist()) - {0}
        return Frame(index, color[..., :3].astype(np.float32) / 255.0,
                     depth.astype(np.float32) / K.depth_scale, mask.astype(np.int32),
                     self.poses[index], K, {i: self.categories[i] for i in ids if i in self.categories})

    def __iter__(self) -> Iterator[Frame]:
        for i in self.indices:
            yield self.frame(i)
