import numpy as np
import pytest
from hypothesis import given, strategies as st

from fragrecon.camera import Intrinsics, Pose
from fragrecon.meshing import MeshFormatError, TriangleMesh, marching_cubes, read_mesh, render_depth, write_mesh
from fragrecon.voxgrid import PayloadKind, SparseVoxelGrid


def field_grid(fn, lo, hi, vs=0.04, origin=(0.0, 0.0, 0.0)):
    r = [np.arange(a, b) for a, b in zip(lo, hi)]
    coords = np.stack(np.meshgrid(*r, indexing="ij"), -1).reshape(-1, 3)
    centers = np.asarray(origin) + (coords + 0.5) * vs
    vals = np.stack([fn(centers), np.ones(len(coords))], 1)
    return SparseVoxelGrid(3, vs, origin, coords, vals, kind=PayloadKind.WEIGHTED_TSDF)


def sphere_fn(c, r):
    return lambda p: np.linalg.norm(p - np.asarray(c), axis=1) - r


def test_no_crossing_gives_empty():
    assert marching_cubes(field_grid(lambda p: np.ones(len(p)), (0, 0, 0), (3, 3, 3))).is_empty


def test_midpoint_vertex():
    # x-centres 0.02 and 0.06 carry +1 and -1, so the surface sits at x = 0.04
    g = field_grid(lambda p: np.where(p[:, 0] < 0.04, 1.0, -1.0), (0, 0, 0), (2, 2, 2))
    m = marching_cubes(g)
    assert len(m) == 2
    assert np.allclose(m.vertices[:, 0], 0.04)


def test_sphere_vertices_on_surface():
    c, r = (0.5, 0.5, 0.5), 0.3
    m = marching_cubes(field_grid(sphere_fn(c, r), (0, 0, 0), (25, 25, 25)))
    d = np.linalg.norm(m.vertices - np.array(c), axis=1)
    assert np.abs(d - r).max() < 0.01
    area = m.triangle_areas().sum()
    assert area == pytest.approx(4 * np.pi * r ** 2, rel=0.03)


def test_sphere_is_closed():
    m = marching_cubes(field_grid(sphere_fn((0.5, 0.5, 0.5), 0.3), (0, 0, 0), (25, 25, 25)))
    e = np.sort(np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_normals_point_outward():
    c = np.array([0.5, 0.5, 0.5])
    m = marching_cubes(field_grid(sphere_fn(c, 0.3), (0, 0, 0), (25, 25, 25)))
    v = m.vertices.astype(np.float64)[m.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(np.einsum("ij,ij->i", n, v.mean(1) - c) > 0)


@given(st.tuples(*(st.integers(-20, 20),) * 3))
def test_translation_equivariance(shift):
    base = field_grid(sphere_fn((0.2, 0.2, 0.2), 0.1), (0, 0, 0), (10, 10, 10))
    moved = SparseVoxelGrid(3, 0.04, (0, 0, 0), base.coords + np.array(shift), base.values,
                            kind=PayloadKind.WEIGHTED_TSDF)
    a, b = marching_cubes(base), marching_cubes(moved)
    assert np.allclose(b.vertices, a.vertices + np.array(shift) * 0.04, atol=1e-5)
    assert np.array_equal(a.triangles, b.triangles)


@given(st.tuples(*(st.floats(-1, 1),) * 3).filter(lambda n: np.linalg.norm(n) > 0.1), st.floats(-0.1, 0.1))
def test_vertices_lie_on_iso_of_linear_field(normal, offset):
    n = np.array(normal)
    fn = lambda p: p @ n - 0.1 * n.sum() + offset
    m = marching_cubes(field_grid(fn, (0, 0, 0), (5, 5, 5)))
    if len(m):
        assert np.abs(fn(m.vertices.astype(np.float64))).max() < 1e-5


def test_incomplete_cube_skipped():
    g = field_grid(lambda p: np.where(p[:, 0] < 0.04, 1.0, -1.0), (0, 0, 0), (2, 2, 2))
    assert marching_cubes(g.subset(np.arange(len(g)) != 0)).is_empty


def test_tsdf_occupancy_threshold():
    g = field_grid(lambda p: np.where(p[:, 0] < 0.04, 1.0, -1.0), (0, 0, 0), (2, 2, 2))
    o = np.full(len(g), 0.9)
    tsdf = SparseVoxelGrid(3, 0.04, (0, 0, 0), g.coords, np.stack([o, g.values[:, 0]], 1), kind=PayloadKind.TSDF)
    assert len(marching_cubes(tsdf)) == 2
    tsdf.values[0, 0] = 0.4
    assert marching_cubes(tsdf).is_empty


def quad(z, half=3.0):
    v = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


class TestRender:
    def test_fronto_parallel_quad(self):
        d = render_depth(quad(2.0), Pose.identity(), Intrinsics.from_fov(64, 48, 60))
        assert np.allclose(d, 2.0)

    def test_tilted_plane_perspective_correct(self):
        intr = Intrinsics.from_fov(40, 30, 60)
        # plane z = 2 + 0.5 x, covering the whole view
        v = np.array([[-3, -3, 0.5], [3, -3, 3.5], [3, 3, 3.5], [-3, 3, 0.5]], dtype=np.float64)
        d = render_depth(TriangleMesh(v, [[0, 1, 2], [0, 2, 3]]), Pose.identity(), intr)
        u = (np.arange(40) + 0.5 - intr.cx) / intr.fx
        expect = 2.0 / (1 - 0.5 * u)  # ray (u, v, 1) * z meets z = 2 + 0.5 u z
        assert np.allclose(d, np.broadcast_to(expect, (30, 40)), rtol=1e-5)

    def test_nearest_surface_wins(self):
        mesh = quad(3.0)
        near = quad(1.5, half=0.1)
        both = TriangleMesh(np.vstack([mesh.vertices, near.vertices]),
                            np.vstack([mesh.triangles, near.triangles + 4]))
        d = render_depth(both, Pose.identity(), Intrinsics.from_fov(64, 48, 60))
        assert d[24, 32] == pytest.approx(1.5) and d[0, 0] == pytest.approx(3.0)

    def test_sphere_centre_pixel(self):
        m = marching_cubes(field_grid(sphere_fn((0.0, 0.0, 2.0), 0.5), (-15, -15, 35), (15, 15, 65)))
        d = render_depth(m, Pose.identity(), Intrinsics.from_fov(64, 48, 60))
        assert d[24, 32] == pytest.approx(1.5, abs=0.01)

    def test_empty_and_behind(self):
        intr = Intrinsics.from_fov(16, 12, 60)
        assert not render_depth(TriangleMesh.empty(), Pose.identity(), intr).any()
        assert not render_depth(quad(-2.0), Pose.identity(), intr).any()


class TestIO:
    @pytest.mark.parametrize("ext", ["ply", "obj"])
    def test_round_trip(self, tmp_path, ext):
        m = marching_cubes(field_grid(sphere_fn((0.2, 0.2, 0.2), 0.1), (0, 0, 0), (10, 10, 10)))
        write_mesh(m, tmp_path / f"m.{ext}")
        back = read_mesh(tmp_path / f"m.{ext}")
        assert np.array_equal(back.triangles, m.triangles)
        assert np.allclose(back.vertices, m.vertices, atol=1e-7)

    def test_ply_normals(self, tmp_path):
        m = quad(1.0).with_vertex_normals()
        write_mesh(m, tmp_path / "n.ply")
        assert np.allclose(read_mesh(tmp_path / "n.ply").normals, [[0, 0, 1]] * 4)

    def test_obj_is_one_based(self, tmp_path):
        write_mesh(quad(1.0), tmp_path / "q.obj")
        faces = [ln for ln in (tmp_path / "q.obj").read_text().splitlines() if ln.startswith("f")]
        assert faces[0] == "f 1 2 3"

    @pytest.mark.parametrize("ext", ["ply", "obj"])
    def test_empty_mesh(self, tmp_path, ext):
        write_mesh(TriangleMesh.empty(), tmp_path / f"e.{ext}")
        assert read_mesh(tmp_path / f"e.{ext}").is_empty

    def test_errors(self, tmp_path):
        (tmp_path / "bad.ply").write_bytes(b"not a ply")
        with pytest.raises(MeshFormatError):
            read_mesh(tmp_path / "bad.ply")
        (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
        with pytest.raises(MeshFormatError):
            read_mesh(tmp_path / "bad.obj")
        write_mesh(quad(1.0), tmp_path / "t.ply")
        (tmp_path / "t.ply").write_bytes((tmp_path / "t.ply").read_bytes()[:-4])
        with pytest.raises(MeshFormatError):
            read_mesh(tmp_path / "t.ply")
        with pytest.raises(ValueError):
            write_mesh(quad(1.0), tmp_path / "m.stl")
        with pytest.raises(MeshFormatError):
            TriangleMesh([[0, 0, 0]], [[0, 0, 1]])
