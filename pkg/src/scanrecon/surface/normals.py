"""PCA normals with minimum-spanning-tree orientation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from scanrecon.core import PointCloud
from scanrecon.errors import DataError


@dataclass(frozen=True, eq=False)
class OrientedCloud:
    points: PointCloud
    normals: np.ndarray

    def __post_init__(self):
        n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
        if n.shape[0] != len(self.points):
            raise ValueError("one normal per point required")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
            raise ValueError("normals must have unit length")
        n.setflags(write=False)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)


def pca_normals(xyz, k=100, workers=1, chunk=20000, tree=None):
    """Unoriented normals: smallest-eigenvalue direction of each k-neighbourhood."""
    xyz = np.asarray(xyz, np.float64)
    tree = tree or cKDTree(xyz)
    out = np.empty_like(xyz)
    for s in range(0, len(xyz), chunk):
        _, idx = tree.query(xyz[s:s + chunk], k=k + 1, workers=workers)
        nb = xyz[idx]
        nb = nb - nb.mean(axis=1, keepdims=True)
        C = np.einsum("nki,nkj->nij", nb, nb)
        _, vecs = np.linalg.eigh(C)
        out[s:s + chunk] = vecs[:, :, 0]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def orient_normals(xyz, normals, k_orient=10, workers=1, tree=None):
    """Consistent signs by propagation along an MST of the k-NN graph.

    Edge weight ``1 - |n_i . n_j|`` favours hops between near-parallel
    normals. Each connected component is rooted at its highest point, whose
    normal is turned toward +z.
    """
    xyz = np.asarray(xyz, np.float64)
    n = np.array(normals, dtype=np.float64)
    N = len(xyz)
    if N == 1:
        return n if n[0, 2] >= 0 else -n
    tree = tree or cKDTree(xyz)
    kk = min(k_orient, N - 1)
    _, idx = tree.query(xyz, k=kk + 1, workers=workers)
    rows = np.repeat(np.arange(N), kk)
    cols = idx[:, 1:].reshape(-1)
    w = 1.0 - np.abs(np.einsum("ij,ij->i", n[rows], n[cols])) + 1e-6
    g = coo_matrix((w, (rows, cols)), shape=(N, N)).tocsr()
    g = g.maximum(g.T)
    mst = minimum_spanning_tree(g)
    mst = mst + mst.T
    ncomp, labels = connected_components(mst, directed=False)
    for comp in range(ncomp):
        members = np.flatnonzero(labels == comp)
        root = int(members[np.argmax(xyz[members, 2])])
        if n[root, 2] < 0:
            n[root] = -n[root]
        order, parent = breadth_first_order(mst, root, directed=False)
        for i in order[1:]:
            if n[i] @ n[parent[i]] < 0:
                n[i] = -n[i]
    return n


def estimate_normals(c: PointCloud, k: int = 100, k_orient: int = 10, workers: int = 1) -> OrientedCloud:
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(c) <= k:
        raise DataError(f"cloud has {len(c)} points, need more than k={k}")
    tree = cKDTree(c.xyz)
    n = pca_normals(c.xyz, k, workers, tree=tree)
    n = orient_normals(c.xyz, n, k_orient, workers, tree=tree)
    return OrientedCloud(c, n)
