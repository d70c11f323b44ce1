"""Classical running-average TSDF fusion of depth maps (projective SDF, lazy sparse allocation)."""
from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

from .voxgrid import PayloadKind, SparseVoxelGrid, replace_region

W_MAX = 255.0


class WeightedTsdfVoxel(NamedTuple):
    tsdf: float
    weight: float


def empty_volume(voxel_size: float = 0.04, origin=(0.0, 0.0, 0.0)) -> SparseVoxelGrid:
    return SparseVoxelGrid(3, voxel_size, origin, kind=PayloadKind.WEIGHTED_TSDF)


def project(points_w: np.ndarray, pose, intr):
    """Camera depth and integer pixel (row, col) of world points; ``inside`` flags in-image hits."""
    pc = pose.world_to_camera(points_w)
    z = pc[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = intr.fx * pc[:, 0] / zs + intr.cx
    v = intr.fy * pc[:, 1] / zs + intr.cy
    inside = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    col = np.clip(np.floor(u), 0, intr.width - 1).astype(np.int64)
    row = np.clip(np.floor(v), 0, intr.height - 1).astype(np.int64)
    return z, row, col, inside


def integrate_depth(grid: SparseVoxelGrid, depth: np.ndarray, pose, intr, lam: float = 0.12,
                    d_max: float = 3.0, w_max: float = W_MAX) -> None:
    """Fold one depth map into every allocated voxel it observes (in place).

    ``sdf_raw = d - z``; voxels more than ``lam`` behind the observed surface are left alone.
    """
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics")
    if len(grid) == 0:
        return
    z, row, col, inside = project(grid.centers(), pose, intr)
    d = depth[row, col]
    sdf_raw = d - z
    upd = inside & (d > 0) & (z <= d_max) & (sdf_raw >= -lam)
    s = np.clip(sdf_raw[upd] / lam, -1.0, 1.0)
    tsdf, w = grid.values[upd, 0], grid.values[upd, 1]
    grid.values[upd, 0] = (tsdf * w + s) / (w + 1.0)
    grid.values[upd, 1] = np.minimum(w + 1.0, w_max)


def band_coords(depth: np.ndarray, pose, intr, voxel_size: float, lam: float, d_max: float,
                origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Voxel coordinates touched by each valid pixel's ray within ``[d - lam, d + lam]`` plus one voxel in front."""
    v, u = np.nonzero((depth > 0) & (depth <= d_max))
    if len(v) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    d = depth[v, u]
    rays = np.stack([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, np.ones_like(d)], axis=1)
    steps = np.arange(-lam, lam + voxel_size + 1e-9, 0.5 * voxel_size)
    zs = d[:, None] - steps[None, :]  # in front of the surface first (positive sdf)
    zs = np.clip(zs, 1e-6, None)
    pts_c = rays[:, None, :] * zs[:, :, None]
    pts_w = pose.apply(pts_c.reshape(-1, 3))
    coords = np.floor((pts_w - np.asarray(origin)) / voxel_size).astype(np.int64)
    return np.unique(coords, axis=0)


def allocate(grid: SparseVoxelGrid, coords: np.ndarray) -> None:
    """Insert zero-weight voxels for coordinates not yet present (in place)."""
    if len(coords) == 0:
        return
    new = coords[grid.lookup(coords) < 0]
    if len(new):
        replace_region(grid, grid.like(new, np.zeros((len(new), 2)), kind=PayloadKind.WEIGHTED_TSDF))


def fuse_sequence(frames: Iterable, lam: float = 0.12, d_max: float = 3.0, voxel_size: float = 0.04,
                  w_max: float = W_MAX) -> SparseVoxelGrid:
    """Fuse every frame's depth in order into a fresh sparse weighted-TSDF volume.

    The union of all frames' bands is allocated before integration, so every voxel sees
    every frame that observes it and the result does not depend on frame order.
    """
    frames = list(frames)
    grid = empty_volume(voxel_size)
    depths = [f.depth if f.depth is not None else f.image for f in frames]
    bands = [band_coords(d, f.pose, f.intrinsics, voxel_size, lam, d_max, grid.origin) for d, f in zip(depths, frames)]
    if bands:
        allocate(grid, np.unique(np.concatenate(bands), axis=0))
    for depth, frame in zip(depths, frames):
        integrate_depth(grid, depth, frame.pose, frame.intrinsics, lam, d_max, w_max)
    return grid.subset(grid.values[:, 1] > 0)
