"""Mesh reconstruction: external tool adapter and a built-in distance-field mesher.

The built-in path samples a signed point-plane distance on a uniform grid,
``f(x) = (x - p) . n`` with ``(p, n)`` the nearest oriented sample, and
extracts ``f = 0`` by marching tetrahedra over a fixed six-tetrahedron split
of every cube. The split is the same in every cube, so neighbouring cubes
agree on their shared faces and the output has no cracks.
"""

from __future__ import annotations

import shlex
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from scanrecon.errors import ConfigError, DataError, ExternalToolError
from scanrecon.surface.mesh import TriangleMesh
from scanrecon.surface.meshio import read_mesh, write_ply
from scanrecon.surface.normals import OrientedCloud

# cube corners as (dx, dy, dz); corner 0 = origin, corner 6 = far corner
CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])
# six tetrahedra sharing the main diagonal 0-6
TETS = np.array([[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
                 [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]])
EDGE_MARGIN = 0.01  # fraction of an edge


def render_command(template: str, input_path, output_path, depth) -> list:
    """Split the template like a shell would, then fill the placeholders per token."""
    if not template or not template.strip():
        raise ConfigError("no external reconstruction tool configured")
    try:
        tokens = shlex.split(template)
    except ValueError as e:
        raise ConfigError(f"bad tool template: {e}") from None
    vals = {"input": str(input_path), "output": str(output_path), "depth": str(depth)}
    try:
        return [t.format(**vals) for t in tokens]
    except (KeyError, IndexError) as e:
        raise ConfigError(f"unknown placeholder {e} in tool template") from None


def reconstruct_external(oc: OrientedCloud, depth: int, template: str, workdir=None,
                         output_name="output.ply", timeout=None) -> TriangleMesh:
    """Write the oriented cloud as PLY, run the tool, parse the mesh it writes."""
    cleanup = workdir is None
    work = Path(tempfile.mkdtemp(prefix="scanrecon-")) if cleanup else Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    try:
        inp, out = work / "input.ply", work / output_name
        write_ply(inp, oc.points.xyz, None, oc.normals)
        cmd = render_command(template, inp, out, depth)
        if shutil.which(cmd[0]) is None and not Path(cmd[0]).is_file():
            raise ExternalToolError(f"external tool not found: {cmd[0]!r}")
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        except OSError as e:
            raise ExternalToolError(f"cannot run {cmd[0]!r}: {e}") from None
        except subprocess.TimeoutExpired:
            raise ExternalToolError(f"{cmd[0]!r} timed out after {timeout} s") from None
        if proc.returncode != 0:
            raise ExternalToolError(
                f"{cmd[0]!r} exited with status {proc.returncode}\n"
                f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}")
        if not out.exists():
            raise ExternalToolError(f"{cmd[0]!r} wrote no output file {out}")
        try:
            mesh = read_mesh(out)
        except (DataError, ValueError, OSError) as e:
            raise ExternalToolError(f"cannot parse tool output {out}: {e}") from None
        if mesh.n_faces == 0:
            raise ExternalToolError(f"{cmd[0]!r} wrote a mesh without facets")
        return mesh
    finally:
        if cleanup:
            shutil.rmtree(work, ignore_errors=True)


def signed_distance(points, normals, query, workers=1, tree=None, chunk=500000):
    tree = tree or cKDTree(points)
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        _, j = tree.query(q, workers=workers)
        out[s:s + chunk] = np.einsum("ij,ij->i", q - points[j], normals[j])
    return out


def marching_tetrahedra(f, origin, cell):
    """Zero level set of node values ``f`` (shape nx, ny, nz) as a triangle mesh.

    Negative is inside. Vertices are shared through the grid edge they lie
    on, and every facet is wound counter-clockwise seen from outside.
    """
    f = np.array(f, dtype=np.float64)
    f[f == 0.0] = 1e-300  # keep the level set off the nodes
    nx, ny, nz = f.shape
    inside = f < 0
    ins = inside.astype(np.int8)
    # cubes whose corners disagree
    tot = sum(ins[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] for dx, dy, dz in CORNERS)
    ci, cj, ck = np.nonzero((tot > 0) & (tot < 8))
    if ci.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    flat = f.reshape(-1)
    node = lambda i, j, k: (i * ny + j) * nz + k  # noqa: E731
    corner_ids = np.stack([node(ci + dx, cj + dy, ck + dz) for dx, dy, dz in CORNERS], axis=1)
    tets = corner_ids[:, TETS].reshape(-1, 4)
    vals = flat[tets]
    tin = vals < 0
    nin = tin.sum(axis=1)
    keep = (nin > 0) & (nin < 4)
    tets, vals, tin, nin = tets[keep], vals[keep], tin[keep], nin[keep]

    # order each tet's corners inside-first (stable) so both cases have a fixed layout
    order = np.argsort(~tin, axis=1, kind="stable")
    t = np.take_along_axis(tets, order, axis=1)

    edges_a, edges_b = [], []
    one = nin == 1
    three = nin == 3
    two = nin == 2
    # 1 inside: lone = corner 0; 3 inside: lone outside = corner 3
    for mask, lone, rest in ((one, 0, (1, 2, 3)), (three, 3, (0, 1, 2))):
        if mask.any():
            tt = t[mask]
            for r in rest:
                edges_a.append(tt[:, lone])
                edges_b.append(tt[:, r])
    tri_edges = []
    k = 0
    for mask, lone, rest in ((one, 0, (1, 2, 3)), (three, 3, (0, 1, 2))):
        if mask.any():
            m = int(mask.sum())
            tri_edges.append(np.stack([np.arange(k + q * m, k + (q + 1) * m) for q in range(3)], axis=1))
            k += 3 * m
    quad_edges = None
    if two.any():
        tt = t[two]
        m = tt.shape[0]
        # inside a=0, b=1; outside c=2, d=3; quad a-c, a-d, b-d, b-c
        for a_, b_ in ((0, 2), (0, 3), (1, 3), (1, 2)):
            edges_a.append(tt[:, a_])
            edges_b.append(tt[:, b_])
        q = np.stack([np.arange(k + s * m, k + (s + 1) * m) for s in range(4)], axis=1)
        k += 4 * m
        quad_edges = q
    ea = np.concatenate(edges_a)
    eb = np.concatenate(edges_b)
    lo, hi = np.minimum(ea, eb), np.maximum(ea, eb)
    key = lo * flat.size + hi
    ukey, inv = np.unique(key, return_inverse=True)
    ulo, uhi = ukey // flat.size, ukey % flat.size

    def pos(idx):
        k_ = idx % nz
        j_ = (idx // nz) % ny
        i_ = idx // (ny * nz)
        return origin + cell * np.column_stack([i_, j_, k_]).astype(np.float64)

    fa, fb = flat[ulo], flat[uhi]
    # keep vertices off the nodes so edges meeting at a node stay apart in float32
    s = np.clip(fa / (fa - fb), EDGE_MARGIN, 1.0 - EDGE_MARGIN)
    verts = pos(ulo) + s[:, None] * (pos(uhi) - pos(ulo))

    faces, dirs = [], []
    tin_sorted = np.take_along_axis(tin, order, axis=1)
    cpos = pos(t.reshape(-1)).reshape(-1, 4, 3)
    w_in = tin_sorted[:, :, None]
    c_in = (cpos * w_in).sum(1) / w_in.sum(1)
    c_out = (cpos * ~w_in).sum(1) / (~w_in).sum(1)
    outward = c_out - c_in
    sel = []
    for mask in (one, three):
        if mask.any():
            sel.append(np.flatnonzero(mask))
    for te, idx in zip(tri_edges, sel):
        faces.append(inv[te])
        dirs.append(outward[idx])
    if quad_edges is not None:
        idx = np.flatnonzero(two)
        qv = inv[quad_edges]
        faces += [qv[:, [0, 1, 2]], qv[:, [0, 2, 3]]]
        dirs += [outward[idx], outward[idx]]
    F = np.concatenate(faces)
    D = np.concatenate(dirs)
    a, b, c = verts[F[:, 0]], verts[F[:, 1]], verts[F[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), D) < 0
    F[flip] = F[flip][:, [0, 2, 1]]
    return TriangleMesh(verts, F)


def reconstruct_builtin(oc: OrientedCloud, cell: float = 1.0, pad: int = 2,
                        max_nodes: int = 30_000_000, workers: int = 1) -> TriangleMesh:
    """Signed point-plane distance on a grid, meshed by marching tetrahedra.

    Only a simplified stand-in for screened Poisson: there is no smoothing
    prior, so thin features and sparse regions are reproduced less faithfully.
    An open surface yields a mesh that reaches the grid border (not watertight).
    """
    if len(oc) == 0:
        raise DataError("cannot reconstruct an empty cloud")
    if not cell > 0:
        raise ValueError("cell must be positive")
    P = oc.points.xyz
    lo = P.min(axis=0) - pad * cell
    hi = P.max(axis=0) + pad * cell
    shape = np.ceil((hi - lo) / cell).astype(np.int64) + 1
    total = int(np.prod(shape))
    if total > max_nodes:
        raise DataError(f"reconstruction grid of {total} nodes exceeds the budget of {max_nodes}; "
                        f"use a larger cell (currently {cell} mm)")
    gi, gj, gk = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    nodes = lo + cell * np.column_stack([gi.ravel(), gj.ravel(), gk.ravel()])
    f = signed_distance(P, oc.normals, nodes, workers).reshape(tuple(shape))
    return marching_tetrahedra(f, lo, cell)
