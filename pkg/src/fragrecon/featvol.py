"""Image features from a small deterministic backbone, unprojected into sparse 3-D feature volumes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import Fbv, Fragment, Frame
from .voxgrid import SparseVoxelGrid, voxel_size_for_level

DEFAULT_STRIDES = (16, 8, 4)
DEFAULT_CHANNELS = (24, 32, 48)
N_BASE_CHANNELS = 3  # intensity, d/dx, d/dy
_CHUNK = 16384


@dataclass
class FeaturePyramid:
    """Per-level feature maps ``[H_l, W_l, C_l]`` at ``strides[l-1]`` relative to the input image."""

    maps: list
    strides: tuple

    @property
    def channels(self) -> tuple:
        return tuple(m.shape[2] for m in self.maps)

    def level(self, l: int) -> np.ndarray:
        return self.maps[l - 1]


def stub_weight_names(n_levels: int = 3) -> list:
    return [f"stub.conv{l}.{p}" for l in range(1, n_levels + 1) for p in ("kernel", "bias")]


def init_stub_weights(channels: Sequence[int] = DEFAULT_CHANNELS, seed: int = 0) -> dict:
    """Seeded backbone weights; values are float32-exact so they survive a weight-file round trip."""
    rng = np.random.default_rng(seed)
    out = {}
    for l, c in enumerate(channels, start=1):
        std = np.sqrt(1.0 / (9 * N_BASE_CHANNELS))
        out[f"stub.conv{l}.kernel"] = rng.normal(0.0, std, (3, 3, N_BASE_CHANNELS, c)).astype(np.float32).astype(np.float64)
        out[f"stub.conv{l}.bias"] = (rng.normal(0.0, 0.1, c)).astype(np.float32).astype(np.float64)
    return out


def _base_channels(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return np.stack([img, gx, gy], axis=2)


def _avg_pool(x: np.ndarray, s: int) -> np.ndarray:
    h, w = x.shape[0] // s, x.shape[1] // s
    return x[:h * s, :w * s].reshape(h, s, w, s, -1).mean(axis=(1, 3))


def _conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, _ = x.shape
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.broadcast_to(bias, (h, w, kernel.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + w] @ kernel[dy, dx]
    return out


def extract_features(frame: Frame, weights: Optional[dict] = None, strides: Sequence[int] = DEFAULT_STRIDES,
                     channels: Sequence[int] = DEFAULT_CHANNELS) -> FeaturePyramid:
    """Pooled intensity/gradient channels, then one 3x3 convolution + tanh per level."""
    intr = frame.intrinsics
    if frame.image.shape[:2] != (intr.height, intr.width):
        raise ValueError(f"image shape {frame.image.shape[:2]} does not match intrinsics")
    weights = weights if weights is not None else init_stub_weights(channels)
    base = _base_channels(frame.image)
    maps = []
    for l, s in enumerate(strides, start=1):
        k = weights[f"stub.conv{l}.kernel"]
        b = weights[f"stub.conv{l}.bias"]
        maps.append(np.tanh(_conv3x3(_avg_pool(base, s), k, b)))
    return FeaturePyramid(maps, tuple(strides))


def fbv_coords(fbv: Fbv, level: int, voxel_size: Optional[float] = None) -> np.ndarray:
    """Every lattice cell (origin 0) of the given level whose cell lies inside the FBV."""
    vs = voxel_size or voxel_size_for_level(level)
    c0 = np.round(np.asarray(fbv.min_corner) / vs).astype(np.int64)
    n = fbv.n_cells(vs)
    r = np.arange(n)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return g + c0


def _bilinear(fmap: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = fmap.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[:, None]
    ay = (y - y0)[:, None]
    top = fmap[y0, x0] * (1 - ax) + fmap[y0, x1] * ax
    bot = fmap[y1, x0] * (1 - ax) + fmap[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def build_feature_volume(fragment: Fragment, pyramids: Sequence[FeaturePyramid], level: int,
                         candidate_coords: np.ndarray, d_max: float = 3.0, voxel_size: Optional[float] = None,
                         depth_residual: bool = False, lam: float = 0.12) -> SparseVoxelGrid:
    """Mean of the features of every view that sees each candidate voxel centre.

    Output channels are ``C_l`` averaged features, then (with ``depth_residual``) the averaged
    projective residual ``clamp((depth - z) / lam, -1, 1)``, then the contributing-view count.
    Cells seen by no view are dropped.  Per-voxel contributions are sorted before summation so
    the result does not depend on view order.
    """
    vs = voxel_size or voxel_size_for_level(level)
    coords = np.asarray(candidate_coords, dtype=np.int64).reshape(-1, 3)
    frames = fragment.frames
    if len(pyramids) != len(frames):
        raise ValueError("one feature pyramid per view is required")
    c = pyramids[0].level(level).shape[2] if pyramids else 0
    width = c + (1 if depth_residual else 0)
    n = len(coords)
    feats = np.zeros((n, width))
    count = np.zeros(n)
    for start in range(0, n, _CHUNK):
        cc = coords[start:start + _CHUNK]
        pts = (cc + 0.5) * vs
        per_view = np.zeros((len(frames), len(cc), width))
        for v, (fr, pyr) in enumerate(zip(frames, pyramids)):
            intr = fr.intrinsics
            pc = fr.pose.world_to_camera(pts)
            z = pc[:, 2]
            zs = np.where(z > 0, z, 1.0)
            u = intr.fx * pc[:, 0] / zs + intr.cx
            w = intr.fy * pc[:, 1] / zs + intr.cy
            vis = (z > 0) & (z <= d_max) & (u >= 0) & (u < intr.width) & (w >= 0) & (w < intr.height)
            if not vis.any():
                continue
            s = pyr.strides[level - 1]
            per_view[v, vis, :c] = _bilinear(pyr.level(level), u[vis] / s - 0.5, w[vis] / s - 0.5)
            if depth_residual:
                depth = fr.depth if fr.depth is not None else fr.image
                d = depth[np.floor(w[vis]).astype(np.int64), np.floor(u[vis]).astype(np.int64)]
                per_view[v, vis, c] = np.where(d > 0, np.clip((d - z[vis]) / lam, -1.0, 1.0), 1.0)
            count[start:start + len(cc)] += vis
        per_view.sort(axis=0)
        feats[start:start + len(cc)] = per_view.sum(axis=0)
    keep = count > 0
    values = np.concatenate([feats[keep] / count[keep, None], count[keep, None]], axis=1)
    return SparseVoxelGrid(level, vs, (0.0, 0.0, 0.0), coords[keep], values)
