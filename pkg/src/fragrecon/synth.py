"""Analytic synthetic scenes: SDF ground truth, sphere-traced depth, GT meshes, scripted trajectories.

Scene files are JSON::

    {
      "primitives": [
        {"type": "sphere", "center": [x, y, z], "radius": r},
        {"type": "box", "center": [x, y, z], "half_size": [hx, hy, hz], "yaw_deg": 0},
        {"type": "slab", "normal": [nx, ny, nz], "lo": a, "hi": b}
      ],
      "room_bounds": [[x0, y0, z0], [x1, y1, z1]],
      "seed": 0
    }

A slab is the solid ``lo <= n . p <= hi``.  Signed distances are negative inside solids and
the scene is the union of its primitives.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .camera import Intrinsics, Pose
from .meshing import TriangleMesh, marching_cubes
from .voxgrid import PayloadKind, SparseVoxelGrid


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_size: tuple
    yaw_deg: float = 0.0

    def sdf(self, p):
        c, s = math.cos(math.radians(self.yaw_deg)), math.sin(math.radians(self.yaw_deg))
        d = p - np.asarray(self.center)
        local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)
        q = np.abs(local) - np.asarray(self.half_size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Slab:
    normal: tuple
    lo: float
    hi: float

    def sdf(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        h = p @ n
        return np.maximum(self.lo - h, h - self.hi)


@dataclass
class SceneSpec:
    primitives: list
    room_bounds: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if not self.primitives:
            raise SceneSpecError("scene needs at least one primitive")
        self.room_bounds = np.asarray(self.room_bounds, dtype=np.float64).reshape(2, 3)
        if np.any(self.room_bounds[1] <= self.room_bounds[0]):
            raise SceneSpecError("room_bounds must have positive extent")
        for prim in self.primitives:
            if isinstance(prim, Sphere) and prim.radius <= 0:
                raise SceneSpecError("sphere radius must be positive")
            if isinstance(prim, Box) and min(prim.half_size) <= 0:
                raise SceneSpecError("box half sizes must be positive")
            if isinstance(prim, Slab) and prim.hi <= prim.lo:
                raise SceneSpecError("slab needs hi > lo")

    @property
    def centroid(self) -> np.ndarray:
        return self.room_bounds.mean(axis=0)

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            if isinstance(p, Sphere):
                prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
            elif isinstance(p, Box):
                prims.append({"type": "box", "center": list(p.center), "half_size": list(p.half_size),
                              "yaw_deg": p.yaw_deg})
            else:
                prims.append({"type": "slab", "normal": list(p.normal), "lo": p.lo, "hi": p.hi})
        return {"primitives": prims, "room_bounds": self.room_bounds.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            prims = []
            for p in d["primitives"]:
                kind = p["type"]
                if kind == "sphere":
                    prims.append(Sphere(tuple(map(float, p["center"])), float(p["radius"])))
                elif kind == "box":
                    prims.append(Box(tuple(map(float, p["center"])), tuple(map(float, p["half_size"])),
                                     float(p.get("yaw_deg", 0.0))))
                elif kind == "slab":
                    prims.append(Slab(tuple(map(float, p["normal"])), float(p["lo"]), float(p["hi"])))
                else:
                    raise SceneSpecError(f"unknown primitive type {kind!r}")
            return cls(prims, d["room_bounds"], int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise SceneSpecError(f"invalid scene spec: {exc}") from None


def load_scene(path) -> SceneSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"spec not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneSpecError(f"{path}: {exc}") from None
    return SceneSpec.from_dict(data)


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def default_room() -> SceneSpec:
    """3.6 m x 3.6 m room (floor + four walls, open top) holding a sphere and a box."""
    half = 1.8
    prims = [
        Slab((0.0, 0.0, 1.0), -1.0, 0.0),
        Slab((1.0, 0.0, 0.0), -half - 1.0, -half),
        Slab((1.0, 0.0, 0.0), half, half + 1.0),
        Slab((0.0, 1.0, 0.0), -half - 1.0, -half),
        Slab((0.0, 1.0, 0.0), half, half + 1.0),
        Sphere((0.45, 0.35, 0.35), 0.35),
        Box((-0.5, -0.4, 0.3), (0.3, 0.25, 0.3), 20.0),
    ]
    return SceneSpec(prims, [[-half, -half, 0.0], [half, half, 1.6]])


def default_objects() -> SceneSpec:
    """Compact free-floating sphere + box, used for the learned-pipeline toy runs."""
    prims = [Sphere((0.18, 0.12, 0.0), 0.24), Box((-0.22, -0.16, 0.0), (0.16, 0.14, 0.18), 25.0)]
    return SceneSpec(prims, [[-0.7, -0.7, -0.6], [0.7, 0.7, 0.6]])


def scene_sdf(spec: SceneSpec, p) -> np.ndarray:
    """Union SDF (meters) at points ``p`` of shape ``(..., 3)``."""
    p = np.asarray(p, dtype=np.float64)
    out = spec.primitives[0].sdf(p)
    for prim in spec.primitives[1:]:
        out = np.minimum(out, prim.sdf(p))
    return out


def camera_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z for every pixel centre, shape (H, W, 3)."""
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)


def render_gt_depth(spec: SceneSpec, pose: Pose, intr: Intrinsics, d_max: float = 3.0,
                    hit_tol: float = 1e-4, max_iter: int = 512, noise_sigma: float = 0.0,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sphere-traced camera-frame z depth; 0 where nothing is hit within ``d_max``."""
    rays = camera_rays(intr).reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    dirs_w = (rays / norms[:, None]) @ pose.rotation.T
    t_far = d_max * norms  # ray length at which z reaches d_max
    t = np.zeros(len(rays))
    hit = np.zeros(len(rays), dtype=bool)
    active = np.arange(len(rays))
    for _ in range(max_iter):
        if len(active) == 0:
            break
        pts = pose.translation + t[active, None] * dirs_w[active]
        d = scene_sdf(spec, pts)
        done = d < hit_tol
        hit[active[done]] = True
        t[active[~done]] += d[~done]
        still = ~done & (t[active] <= t_far[active])
        active = active[still]
    depth = np.where(hit & (t <= t_far), t / norms, 0.0)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(spec.seed)
        depth = np.where(depth > 0, depth + rng.normal(0.0, noise_sigma, depth.shape), 0.0)
    return depth.reshape(intr.height, intr.width)


def sdf_grid(spec: SceneSpec, lo, hi, voxel_size: float, lam: float = 0.12, band: Optional[float] = None,
             level: int = 3) -> SparseVoxelGrid:
    """Sparse TSDF grid (o=1, x=clamp(sdf/lam)) of voxels whose centres lie in ``[lo, hi]``.

    Only voxels with ``|sdf| < band`` are kept (default: two voxel diagonals), which is all
    marching cubes needs.
    """
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    band = 2 * math.sqrt(3) * voxel_size if band is None else band
    c0 = np.floor(lo / voxel_size).astype(np.int64)
    c1 = np.ceil(hi / voxel_size).astype(np.int64)
    coords, vals = [], []
    xs = np.arange(c0[0], c1[0])
    ys = np.arange(c0[1], c1[1])
    zs = np.arange(c0[2], c1[2])
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    for x in xs:
        c = np.stack([np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1)
        p = (c + 0.5) * voxel_size
        inside = np.all((p >= lo) & (p <= hi), axis=1)
        d = scene_sdf(spec, p)
        keep = inside & (np.abs(d) < band)
        coords.append(c[keep])
        vals.append(d[keep])
    coords = np.concatenate(coords) if coords else np.zeros((0, 3), dtype=np.int64)
    d = np.concatenate(vals) if vals else np.zeros(0)
    payload = np.stack([np.ones(len(d)), np.clip(d / lam, -1.0, 1.0)], axis=1)
    return SparseVoxelGrid(level, voxel_size, (0.0, 0.0, 0.0), coords, payload, kind=PayloadKind.TSDF)


def gt_mesh(spec: SceneSpec, voxel_size: float = 0.02, bounds=None, lam: float = 0.12) -> TriangleMesh:
    """Marching cubes over a dense sampling of the clamped scene SDF inside ``bounds``.

    ``bounds`` defaults to the room bounds.  Sampling extends one truncation band beyond
    the bounds so surfaces lying on the boundary are captured; triangles are then cropped.
    """
    lo, hi = (spec.room_bounds if bounds is None else np.asarray(bounds, dtype=np.float64))
    if np.any(hi <= lo):
        return TriangleMesh.empty()
    grid = sdf_grid(spec, lo - lam, hi + lam, voxel_size, lam)
    mesh = marching_cubes(grid)
    if mesh.is_empty:
        return mesh
    return mesh.cropped(lo - 1e-9, hi + 1e-9)


def scripted_trajectory(spec: SceneSpec, kind: str = "orbit", n_frames: int = 60, radius: float = 2.0,
                        height: Optional[float] = None, target=None, step_deg: Optional[float] = None,
                        keyframe_every: Optional[int] = None, r_max: float = 15.0,
                        height_amplitude: float = 0.0, start_deg: float = 0.0,
                        scan_step: float = 0.05) -> list:
    """Deterministic camera paths.

    ``orbit`` circles ``target`` (default: scene centroid) at ``radius`` looking inward.  The
    angular step is ``360 / n_frames`` unless ``step_deg`` is given, or ``keyframe_every=k``
    requests a step for which exactly every ``k``-th frame exceeds ``r_max`` of rotation
    relative to the previous such frame.  ``height_amplitude`` alternates the camera height
    by +/- that amount on successive frames.  ``scan-line`` translates a camera parallel to
    the x axis by ``scan_step`` per frame, looking along +y.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    target = spec.centroid if target is None else np.asarray(target, dtype=np.float64)
    height = target[2] if height is None else height
    if kind == "orbit":
        if keyframe_every is not None:
            step = r_max / (keyframe_every - 0.5)
        elif step_deg is not None:
            step = step_deg
        else:
            step = 360.0 / n_frames
        poses = []
        for i in range(n_frames):
            a = math.radians(start_deg + i * step)
            z = height + (height_amplitude if i % 2 == 0 else -height_amplitude)
            eye = np.array([target[0] + radius * math.cos(a), target[1] + radius * math.sin(a), z])
            poses.append(Pose.look_at(eye, target))
        return poses
    if kind == "scan-line":
        x0 = target[0] - 0.5 * scan_step * (n_frames - 1)
        y = target[1] - radius
        return [Pose.look_at((x0 + i * scan_step, y, height), (x0 + i * scan_step, target[1], height))
                for i in range(n_frames)]
    raise ValueError(f"unknown trajectory kind {kind!r}")
