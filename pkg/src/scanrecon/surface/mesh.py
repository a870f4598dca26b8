"""Indexed triangle meshes and the watertightness report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("facet index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate facet (repeated vertex)")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def face_normals(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    def area(self):
        return float(0.5 * np.linalg.norm(self.face_normals(), axis=1).sum())

    def volume(self):
        """Signed enclosed volume (positive for outward-facing facets)."""
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


@dataclass(frozen=True)
class WatertightReport:
    boundary_edges: int
    nonmanifold_edges: int
    euler: int
    components: int
    watertight: bool

    def to_dict(self):
        return {"boundary_edges": self.boundary_edges, "nonmanifold_edges": self.nonmanifold_edges,
                "euler": self.euler, "components": self.components, "watertight": self.watertight}


def edge_counts(faces):
    """Unique undirected edges and how many facets border each."""
    f = np.asarray(faces, np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def check_watertight(m: TriangleMesh) -> WatertightReport:
    if m.n_faces == 0:
        return WatertightReport(0, 0, 0, 0, False)
    edges, counts = edge_counts(m.faces)
    used = np.unique(m.faces)
    V, E, F = used.size, edges.shape[0], m.n_faces
    remap = np.full(len(m.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(V)
    a, b = remap[edges[:, 0]], remap[edges[:, 1]]
    g = coo_matrix((np.ones(E), (a, b)), shape=(V, V))
    ncomp, _ = connected_components(g, directed=False)
    boundary = int(np.count_nonzero(counts == 1))
    nonman = int(np.count_nonzero(counts > 2))
    return WatertightReport(boundary, nonman, int(V - E + F), int(ncomp), boundary == 0 and nonman == 0)
