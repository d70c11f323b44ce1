"""Marching cubes on sparse TSDF grids, depth rendering of meshes, PLY/OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .voxgrid import PayloadKind, SparseVoxelGrid

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)
# the endpoint with the smaller coordinate along the edge axis
_EDGE_LOW = np.where(_CORNERS[_EDGES[:, 0], _EDGE_AXIS] < _CORNERS[_EDGES[:, 1], _EDGE_AXIS],
                     _EDGES[:, 0], _EDGES[:, 1])
_EDGE_HIGH = np.where(_EDGE_LOW == _EDGES[:, 0], _EDGES[:, 1], _EDGES[:, 0])

_TRI_TABLE = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRIANGLES):
    _TRI_TABLE[_case, :len(_row)] = _row
_TRI_COUNT = np.array([len(r) // 3 for r in TRIANGLES], dtype=np.int64)


class MeshFormatError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray            # (V, 3) float32, meters
    triangles: np.ndarray           # (T, 3) int64
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float32).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshFormatError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices.astype(np.float64)[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices.astype(np.float64) + np.asarray(offset), self.triangles.copy())

    def cropped(self, lo, hi) -> "TriangleMesh":
        """Triangles whose centroid lies in the box ``[lo, hi]``; unused vertices are dropped."""
        v = self.vertices.astype(np.float64)
        cen = v[self.triangles].mean(axis=1)
        keep = np.all((cen >= np.asarray(lo)) & (cen <= np.asarray(hi)), axis=1)
        tris = self.triangles[keep]
        used, inv = np.unique(tris, return_inverse=True)
        return TriangleMesh(self.vertices[used], inv.reshape(-1, 3))

    def with_vertex_normals(self) -> "TriangleMesh":
        v = self.vertices.astype(np.float64)
        t = v[self.triangles]
        fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        vn = np.where(norm > 0, vn / np.maximum(norm, 1e-300), 0.0)
        return TriangleMesh(self.vertices, self.triangles, vn)


def _field(grid: SparseVoxelGrid, theta: float):
    """Scalar values and validity mask for the payload kinds marching cubes understands."""
    if grid.kind == PayloadKind.TSDF:
        return grid.values[:, 1], grid.values[:, 0] >= theta
    if grid.kind == PayloadKind.WEIGHTED_TSDF:
        return grid.values[:, 0], grid.values[:, 1] > 0
    return grid.values[:, 0], np.ones(len(grid), dtype=bool)


def marching_cubes(grid: SparseVoxelGrid, iso: float = 0.0, theta: float = 0.5) -> TriangleMesh:
    """Extract the ``iso`` surface from values sampled at voxel centres.

    A cube is formed by 8 mutually adjacent valid voxels; cubes with any missing corner are
    skipped.  For TSDF payloads, corners with occupancy below ``theta`` count as missing.
    Shared edges share one vertex, so the result is watertight wherever the field is complete.
    """
    values, valid = _field(grid, theta)
    g = grid.subset(valid)
    vals = values[valid]
    n = len(g)
    if n == 0:
        return TriangleMesh.empty()
    corner_idx = np.stack([g.lookup(g.coords + off) for off in _CORNERS], axis=1)
    full = np.all(corner_idx >= 0, axis=1)
    corner_idx = corner_idx[full]
    cv = vals[corner_idx]
    case = ((cv < iso).astype(np.int64) << np.arange(8)).sum(axis=1)
    active = (case != 0) & (case != 255)
    corner_idx, cv, case = corner_idx[active], cv[active], case[active]
    if len(case) == 0:
        return TriangleMesh.empty()

    edge_list = _TRI_TABLE[case]                      # (m, 15)
    cube_of = np.repeat(np.arange(len(case)), 15).reshape(len(case), 15)
    used = edge_list >= 0
    e = edge_list[used]
    cube = cube_of[used]
    low_voxel = corner_idx[cube, _EDGE_LOW[e]]
    edge_id = low_voxel * 3 + _EDGE_AXIS[e]
    uniq, first, inverse = np.unique(edge_id, return_index=True, return_inverse=True)

    ue, uc = e[first], cube[first]
    a_idx, b_idx = corner_idx[uc, _EDGE_LOW[ue]], corner_idx[uc, _EDGE_HIGH[ue]]
    xa, xb = vals[a_idx], vals[b_idx]
    denom = xb - xa
    safe = denom != 0
    t = np.where(safe, (iso - xa) / np.where(safe, denom, 1.0), 0.5)
    centers = g.origin + (g.coords + 0.5) * g.voxel_size
    pa, pb = centers[a_idx], centers[b_idx]
    verts = pa + t[:, None] * (pb - pa)
    tris = inverse.reshape(-1, 3)
    # table winding is inside-out with respect to the increasing-value side
    tris = tris[:, ::-1]
    return TriangleMesh(verts, tris)



# ---------------------------------------------------------------------------
# rendering

def render_depth(mesh: TriangleMesh, pose, intr, near: float = 1e-4, max_pairs: int = 4_000_000) -> np.ndarray:
    """Z-buffer rasterisation of camera-frame depth; 0 where no triangle covers the pixel centre.

    Triangles with a vertex closer than ``near`` are skipped (no clipping).  Depth is
    interpolated perspective-correctly, so planar geometry renders exactly.
    """
    h, w = intr.height, intr.width
    zbuf = np.full(h * w, np.inf)
    if mesh.is_empty:
        return np.zeros((h, w))
    pc = pose.world_to_camera(mesh.vertices.astype(np.float64))
    tri = mesh.triangles
    z = pc[tri, 2]
    keep = np.all(z > near, axis=1)
    tri, z = tri[keep], z[keep]
    u = intr.fx * pc[:, 0] / np.where(pc[:, 2] > near, pc[:, 2], 1.0) + intr.cx
    v = intr.fy * pc[:, 1] / np.where(pc[:, 2] > near, pc[:, 2], 1.0) + intr.cy
    tu, tv = u[tri], v[tri]
    x0 = np.maximum(np.ceil(tu.min(axis=1) - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(tu.max(axis=1) - 0.5), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(tv.min(axis=1) - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(tv.max(axis=1) - 0.5), h - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    ok = (nx > 0) & (ny > 0)
    area = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (tu[:, 2] - tu[:, 0]) * (tv[:, 1] - tv[:, 0])
    ok &= np.abs(area) > 1e-12
    sel = np.nonzero(ok)[0]
    counts = (nx * ny)[sel]
    start = 0
    while start < len(sel):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_pairs, side="right")))
        s = sel[start:stop]
        c = counts[start:stop]
        tid = np.repeat(s, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        px = x0[tid] + local % nx[tid]
        py = y0[tid] + local // nx[tid]
        cx, cy = px + 0.5, py + 0.5
        a, uu, vv = area[tid], tu[tid], tv[tid]
        w0 = ((uu[:, 1] - cx) * (vv[:, 2] - cy) - (uu[:, 2] - cx) * (vv[:, 1] - cy)) / a
        w1 = ((uu[:, 2] - cx) * (vv[:, 0] - cy) - (uu[:, 0] - cx) * (vv[:, 2] - cy)) / a
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        zz = z[tid]
        inv_z = w0 / zz[:, 0] + w1 / zz[:, 1] + w2 / zz[:, 2]
        depth = 1.0 / inv_z[inside]
        np.minimum.at(zbuf, (py * w + px)[inside], depth)
        start = stop
    zbuf[~np.isfinite(zbuf)] = 0.0
    return zbuf.reshape(h, w)


# ---------------------------------------------------------------------------
# I/O

def write_mesh(mesh: TriangleMesh, path, fmt: Optional[str] = None) -> None:
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt == "ply":
        _write_ply(mesh, path)
    elif fmt == "obj":
        _write_obj(mesh, path)
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")


def read_mesh(path) -> TriangleMesh:
    fmt = Path(path).suffix.lstrip(".").lower()
    if fmt == "ply":
        return _read_ply(path)
    if fmt == "obj":
        return _read_obj(path)
    raise ValueError(f"unsupported mesh format {fmt!r}")


def _write_ply(mesh: TriangleMesh, path) -> None:
    has_n = mesh.normals is not None
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if has_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    vdt = np.dtype([("p", "<f4", 6 if has_n else 3)])
    varr = np.empty(len(mesh.vertices), dtype=vdt)
    varr["p"] = np.hstack([mesh.vertices, mesh.normals]) if has_n else mesh.vertices
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    farr = np.empty(len(mesh.triangles), dtype=fdt)
    farr["n"] = 3
    farr["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(varr.tobytes())
        fh.write(farr.tobytes())


def _read_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MeshFormatError(f"{path}: malformed PLY header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported")
    nv = nf = None
    vprops = []
    current = None
    for ln in header:
        parts = ln.split()
        if parts[:1] == ["element"] and len(parts) == 3:
            current = parts[1]
            if current == "vertex":
                nv = int(parts[2])
            elif current == "face":
                nf = int(parts[2])
        elif parts[:1] == ["property"] and current == "vertex":
            if parts[1] != "float":
                raise MeshFormatError(f"{path}: unsupported vertex property type {parts[1]}")
            vprops.append(parts[2])
        elif parts[:1] == ["property"] and current == "face":
            if parts[1:] != ["list", "uchar", "int", "vertex_indices"]:
                raise MeshFormatError(f"{path}: unsupported face property {' '.join(parts[1:])}")
    if nv is None or nf is None or vprops[:3] != ["x", "y", "z"]:
        raise MeshFormatError(f"{path}: malformed PLY header")
    body = data[end + len(b"end_header\n"):]
    vdt = np.dtype([("p", "<f4", len(vprops))])
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    need = nv * vdt.itemsize + nf * fdt.itemsize
    if len(body) != need:
        raise MeshFormatError(f"{path}: body has {len(body)} bytes, expected {need}")
    varr = np.frombuffer(body[:nv * vdt.itemsize], dtype=vdt)["p"].reshape(nv, len(vprops))
    farr = np.frombuffer(body[nv * vdt.itemsize:], dtype=fdt)
    if nf and np.any(farr["n"] != 3):
        raise MeshFormatError(f"{path}: only triangle faces are supported")
    tris = farr["i"].astype(np.int64).reshape(nf, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= nv):
        raise MeshFormatError(f"{path}: face index out of range")
    normals = varr[:, 3:6] if vprops[3:6] == ["nx", "ny", "nz"] else None
    return TriangleMesh(varr[:, :3], tris, normals)


def _write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write("v %.9g %.9g %.9g\n" % tuple(float(c) for c in p))
        for t in mesh.triangles:
            fh.write("f %d %d %d\n" % tuple(int(i) + 1 for i in t))


def _read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, ln in enumerate(fh, start=1):
            parts = ln.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(c) for c in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise ValueError("only triangles are supported")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError as exc:
                raise MeshFormatError(f"{path}: line {lineno}: {exc}") from None
    tris = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise MeshFormatError(f"{path}: face index out of range")
    return TriangleMesh(np.array(verts, dtype=np.float32).reshape(-1, 3), tris)
