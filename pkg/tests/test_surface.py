import shlex
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scanrecon.core import PointCloud
from scanrecon.errors import ConfigError, DataError, ExternalToolError
from scanrecon.surface import (OrientedCloud, TriangleMesh, check_watertight, estimate_normals,
                               export_mesh, marching_tetrahedra, read_mesh, read_ply, read_stl,
                               reconstruct_builtin, reconstruct_external, render_command, write_ply,
                               write_stl)

from oracles import TET_F, TET_V, fib_sphere

def cube_samples(side=20.0, step=0.25):
    g = np.arange(0, side + 1e-9, step)
    A, B = np.meshgrid(g, g, indexing="ij")
    a, b = A.ravel(), B.ravel()
    pts, nrm = [], []
    for axis in range(3):
        for val, sgn in ((0.0, -1.0), (side, 1.0)):
            P = np.zeros((a.size, 3))
            o = [d for d in range(3) if d != axis]
            P[:, axis], P[:, o[0]], P[:, o[1]] = val, a, b
            N = np.zeros_like(P)
            N[:, axis] = sgn
            pts.append(P)
            nrm.append(N)
    P, N = np.vstack(pts), np.vstack(nrm)
    _, keep = np.unique(np.round(P, 6), axis=0, return_index=True)
    return P[keep], N[keep]


# -- watertight fixtures ---------------------------------------------------------

def test_tetrahedron_closed():
    r = check_watertight(TriangleMesh(TET_V, TET_F))
    assert r.watertight and r.euler == 2 and r.components == 1 and r.boundary_edges == 0


def test_tetrahedron_open():
    r = check_watertight(TriangleMesh(TET_V, TET_F[:3]))
    assert not r.watertight and r.boundary_edges == 3 and r.nonmanifold_edges == 0


def test_two_tetrahedra():
    V = np.vstack([TET_V, TET_V + 5])
    F = np.vstack([TET_F, TET_F + 4])
    r = check_watertight(TriangleMesh(V, F))
    assert r.watertight and r.euler == 4 and r.components == 2


def test_nonmanifold_fin():
    V = np.vstack([TET_V, [[1.0, 1.0, 0.0]]])
    F = np.vstack([TET_F, [[0, 1, 4]]])
    r = check_watertight(TriangleMesh(V, F))
    assert r.nonmanifold_edges == 1 and not r.watertight


def test_mesh_validation():
    with pytest.raises(ValueError):
        TriangleMesh(TET_V, [[0, 1, 9]])
    with pytest.raises(ValueError):
        TriangleMesh(TET_V, [[0, 0, 1]])


def test_tet_volume_sign():
    assert TriangleMesh(TET_V, TET_F).volume() == pytest.approx(1 / 6)


# -- files ----------------------------------------------------------------------

def test_one_triangle_stl_size(tmp_path):
    p = tmp_path / "t.stl"
    write_stl(p, TriangleMesh(TET_V[:3], [[0, 1, 2]]))
    assert p.stat().st_size == 134


def test_stl_round_trip(tmp_path):
    m = TriangleMesh(TET_V, TET_F)
    write_stl(tmp_path / "t.stl", m)
    back = read_stl(tmp_path / "t.stl")
    assert back.n_faces == 4 and check_watertight(back).watertight
    assert np.allclose(np.sort(back.vertices, axis=0), np.sort(TET_V, axis=0))


def test_empty_mesh_refused(tmp_path):
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    for fmt in ("stl-binary", "ply"):
        with pytest.raises(DataError):
            export_mesh(empty, tmp_path / "e", fmt)
    assert not (tmp_path / "e").exists()


def test_ascii_ply_reader(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
                 "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    m, n = read_ply(p)
    assert m.n_faces == 2 and n is None


def test_big_endian_ply_reader(tmp_path):
    p = tmp_path / "b.ply"
    head = ("ply\nformat binary_big_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\n"
            "property double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n")
    body = np.array(TET_V[:3], ">f8").tobytes() + bytes([3]) + np.array([0, 1, 2], ">i4").tobytes()
    p.write_bytes(head.encode() + body)
    m, _ = read_ply(p)
    assert np.array_equal(m.vertices, TET_V[:3]) and m.n_faces == 1


@given(st.integers(1, 200), st.integers(0, 2**31), st.booleans())
def test_ply_bit_exact(n, seed, with_normals):
    import tempfile, pathlib
    rng = np.random.default_rng(seed)
    # float32 is the on-disk type, so values representable in float32 survive exactly
    V = (rng.normal(size=(n, 3)) * 100).astype(np.float32).astype(np.float64)
    N = rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64) if with_normals else None
    F = np.array([[0, 1, 2]]) if n >= 3 else None
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "p.ply"
        write_ply(path, V, F, N)
        m, nb = read_ply(path)
    assert np.array_equal(m.vertices, V)
    if with_normals:
        assert np.array_equal(nb, N)


def test_read_mesh_dispatch(tmp_path):
    m = TriangleMesh(TET_V, TET_F)
    export_mesh(m, tmp_path / "m.ply", "ply")
    export_mesh(m, tmp_path / "m.stl", "stl-binary")
    assert read_mesh(tmp_path / "m.ply").n_faces == read_mesh(tmp_path / "m.stl").n_faces == 4


# -- normals ------------------------------------------------------------------------

def test_plane_normals():
    g = np.arange(20) * 0.5
    X, Y = np.meshgrid(g, g)
    c = PointCloud(np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)]))
    oc = estimate_normals(c, k=8)
    assert np.allclose(np.abs(oc.normals[:, 2]), 1, atol=1e-9)
    assert np.all(np.sign(oc.normals[:, 2]) == np.sign(oc.normals[0, 2]))


def test_sphere_normals():
    P, U = fib_sphere(10000)
    oc = estimate_normals(PointCloud(P), k=100)
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", oc.normals, U), -1, 1)))
    assert np.quantile(ang, 0.99) < 2.0


def test_parallel_planes_no_flips():
    g = np.arange(30) * 0.2
    X, Y = np.meshgrid(g, g)
    a = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    P = np.vstack([a, a + [0, 0, 1.0]])
    oc = estimate_normals(PointCloud(P), k=8)
    for half in (oc.normals[: len(a)], oc.normals[len(a):]):
        s = np.sign(half[:, 2])
        assert np.all(s == s[0])


def test_normals_validation():
    with pytest.raises(ValueError):
        OrientedCloud(PointCloud([[0.0, 0, 0]]), [[0, 0, 2.0]])
    with pytest.raises(DataError):
        estimate_normals(PointCloud(np.zeros((5, 3))), k=10)


# -- reconstruction --------------------------------------------------------------------

def test_sphere_reconstruction():
    P, U = fib_sphere(10000)
    m = reconstruct_builtin(OrientedCloud(PointCloud(P), U), cell=0.5)
    r = check_watertight(m)
    assert r.watertight and r.euler == 2
    assert np.mean(np.abs(np.linalg.norm(m.vertices, axis=1) - 10.0)) < 0.25
    assert m.volume() > 0


def test_cube_reconstruction():
    P, N = cube_samples()
    m = reconstruct_builtin(OrientedCloud(PointCloud(P), N), cell=0.5)
    assert check_watertight(m).watertight
    assert abs(m.area() - 2400.0) / 2400.0 < 0.05


def test_half_plane_not_watertight():
    g = np.arange(0, 10, 0.25)
    X, Y = np.meshgrid(g, g)
    P = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    N = np.tile([0, 0, 1.0], (len(P), 1))
    m = reconstruct_builtin(OrientedCloud(PointCloud(P), N), cell=0.5)
    assert not check_watertight(m).watertight


def test_grid_budget():
    P, U = fib_sphere(500)
    with pytest.raises(DataError, match="budget"):
        reconstruct_builtin(OrientedCloud(PointCloud(P), U), cell=0.1, max_nodes=1000)


def test_marching_tetrahedra_sphere_field():
    g = np.arange(-6, 6.01, 0.5)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    f = np.sqrt(X**2 + Y**2 + Z**2) - 4.0
    m = marching_tetrahedra(f, np.array([-6.0, -6, -6]), 0.5)
    r = check_watertight(m)
    assert r.watertight and r.euler == 2
    assert abs(m.volume() - 4 / 3 * np.pi * 64) / (4 / 3 * np.pi * 64) < 0.03


@given(st.floats(1.2, 4.0), st.tuples(*[st.floats(-0.5, 0.5)] * 3))
def test_marching_tetrahedra_closed_for_any_ball(r, c):
    g = np.arange(-5, 5.01, 0.5)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    f = np.sqrt((X - c[0])**2 + (Y - c[1])**2 + (Z - c[2])**2) - r
    m = marching_tetrahedra(f, np.array([-5.0, -5, -5]), 0.5)
    rep = check_watertight(m)
    assert rep.watertight and rep.euler == 2 and m.volume() > 0


def test_near_zero_nodes_survive_stl(tmp_path):
    # level set passing within 1e-12 of grid nodes, far from the origin
    g = np.arange(-5, 5.01, 0.5)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    f = np.sqrt(X**2 + Y**2 + Z**2) - 3.0
    f[np.abs(f) < 1e-9] = 1e-12
    m = marching_tetrahedra(f, np.array([595.0, 95.0, -5.0]), 0.5)
    export_mesh(m, tmp_path / "m.stl")
    back = read_mesh(tmp_path / "m.stl")
    rep = check_watertight(back)
    assert rep.watertight and rep.euler == 2


# -- external adapter ---------------------------------------------------------------------

def test_render_depth_literal():
    cmd = render_command("poisson --in {input} --out {output} --depth {depth}", "a.ply", "b.ply", 12)
    assert cmd == ["poisson", "--in", "a.ply", "--out", "b.ply", "--depth", "12"]


def test_render_quoting_and_errors():
    assert render_command("'my tool' {input}", "x y.ply", "o", 1) == ["my tool", "x y.ply"]
    with pytest.raises(ConfigError):
        render_command("", "a", "b", 1)
    with pytest.raises(ConfigError):
        render_command("tool {nope}", "a", "b", 1)


def small_cloud():
    P, U = fib_sphere(200)
    return OrientedCloud(PointCloud(P), U)


def test_external_identity_copy(tmp_path):
    fixture = TriangleMesh(TET_V, TET_F)
    export_mesh(fixture, tmp_path / "fixture.ply", "ply")
    tpl = f"{shlex.quote(sys.executable)} -c 'import shutil,sys; shutil.copy(sys.argv[1], sys.argv[2])' " \
          f"{shlex.quote(str(tmp_path / 'fixture.ply'))} {{output}}"
    m = reconstruct_external(small_cloud(), 12, tpl)
    assert np.array_equal(m.vertices, fixture.vertices) and np.array_equal(m.faces, fixture.faces)


def test_external_receives_oriented_input(tmp_path):
    tpl = f"{shlex.quote(sys.executable)} -c 'import shutil,sys; shutil.copy(sys.argv[1], sys.argv[2])' " \
          "{input} {output}"
    work = tmp_path / "w"
    # echoing the input back gives a point cloud without facets
    with pytest.raises(ExternalToolError, match="without facets"):
        reconstruct_external(small_cloud(), 12, tpl, workdir=work)
    _, n = read_ply(work / "input.ply")
    assert n is not None and n.shape == (200, 3)


def test_external_missing_executable():
    with pytest.raises(ExternalToolError, match="no-such-poisson"):
        reconstruct_external(small_cloud(), 12, "no-such-poisson {input} {output}")


def test_external_failure_carries_output():
    tpl = f"{shlex.quote(sys.executable)} -c 'import sys; print(\"boom\", file=sys.stderr); sys.exit(3)'"
    with pytest.raises(ExternalToolError, match="boom"):
        reconstruct_external(small_cloud(), 12, tpl)


def test_external_no_output():
    tpl = f"{shlex.quote(sys.executable)} -c 'pass' {{input}} {{output}}"
    with pytest.raises(ExternalToolError, match="no output"):
        reconstruct_external(small_cloud(), 12, tpl)
