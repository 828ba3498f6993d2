"""Appearance/shape descriptor used for library retrieval.

A view descriptor concatenates masked RGB histograms (16 bins per channel) with a
histogram of surface-normal angles against the viewing direction (16 bins).  Each
block is L1-normalised; an object's descriptor is the mean over its views,
L2-normalised.  Any other embedding (e.g. one computed offline by an image model)
can be used instead by loading it with :func:`load_embedding`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RGB_BINS = 16
NORMAL_BINS = 16
DIM = 3 * RGB_BINS + NORMAL_BINS


@dataclass
class DescriptorView:
    """Masked observation of one object: colours in [0,1], mask (bool) and optional depth/intrinsics."""

    color: np.ndarray
    mask: np.ndarray
    depth: Optional[np.ndarray] = None
    fx: float = 1.0
    fy: float = 1.0


def depth_normals(depth: np.ndarray, fx: float, fy: float) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame normals from central differences of a depth map; returns (normals, valid)."""
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    z = depth.astype(np.float64)
    # relative coordinates suffice: the principal point cancels in differences
    P = np.stack([u * z / fx, v * z / fy, z], axis=-1)
    dx = np.zeros_like(P)
    dy = np.zeros_like(P)
    dx[:, 1:-1] = P[:, 2:] - P[:, :-2]
    dy[1:-1] = P[2:] - P[:-2]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    valid = (z > 0) & (norm > 0)
    valid[:, [0, -1]] = False
    valid[[0, -1], :] = False
    valid[1:-1, 1:-1] &= (z[1:-1, 2:] > 0) & (z[1:-1, :-2] > 0) & (z[2:, 1:-1] > 0) & (z[:-2, 1:-1] > 0)
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    n[n[..., 2] > 0] *= -1.0  # face the camera
    return n, valid


def view_descriptor(view: DescriptorView) -> np.ndarray:
    mask = np.asarray(view.mask, dtype=bool)
    if not mask.any():
        raise ValueError("view has an empty mask")
    col = np.clip(np.asarray(view.color, dtype=np.float64)[mask], 0.0, 1.0)
    blocks = []
    for ch in range(3):
        h, _ = np.histogram(col[:, ch], bins=RGB_BINS, range=(0.0, 1.0))
        blocks.append(h / h.sum())
    nb = np.zeros(NORMAL_BINS)
    if view.depth is not None:
        n, valid = depth_normals(view.depth, view.fx, view.fy)
        sel = valid & mask
        if sel.any():
            # angle between the normal and the direction back to the camera
            ang = np.arccos(np.clip(-n[sel][:, 2], -1.0, 1.0))
            nb, _ = np.histogram(ang, bins=NORMAL_BINS, range=(0.0, np.pi / 2))
            nb = nb / max(nb.sum(), 1)
    blocks.append(nb)
    return np.concatenate(blocks)


def compute_view_descriptor(views: Sequence[DescriptorView]) -> np.ndarray:
    """Average of the per-view descriptors of every non-empty view, L2-normalised."""
    descs = [view_descriptor(v) for v in views if np.any(v.mask)]
    if not descs:
        raise ValueError("all views are empty")
    d = np.mean(descs, axis=0)
    return d / np.linalg.norm(d)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def load_embedding(path) -> np.ndarray:
    """Externally computed embedding: whitespace-separated text or raw float32 (``.bin``)."""
    path = Path(path)
    if path.suffix == ".bin":
        v = np.fromfile(path, dtype="<f4").astype(np.float64)
    else:
        v = np.loadtxt(path, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    if v.size == 0 or not np.isfinite(n) or n == 0:
        raise ValueError(f"{path}: embedding is empty or zero")
    return v / n
