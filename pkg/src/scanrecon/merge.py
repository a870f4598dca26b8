"""Box-grid merging of aligned scans and target-keyed connectivity segmentation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from scanrecon.core import PointCloud
from scanrecon.errors import DataError


def voxel_keys(xyz, voxel_size, origin=None):
    """Integer cube index of each point, cubes anchored at ``origin`` (default: min corner)."""
    xyz = np.asarray(xyz, np.float64)
    origin = xyz.min(axis=0) if origin is None else np.asarray(origin, np.float64)
    return np.floor((xyz - origin) / voxel_size).astype(np.int64)


def box_grid_merge(clouds: Sequence[PointCloud], voxel_size: float = 0.1) -> PointCloud:
    """One point per occupied cube: the centroid of its members (intensity averaged).

    Output is sorted by cube index, so it does not depend on input order
    beyond floating-point summation.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    clouds = [c for c in clouds]
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise DataError("nothing to merge")
    frames = {c.frame for c in clouds}
    if frames != {"reference"}:
        raise DataError(f"clouds must all be in the reference frame, got {sorted(frames)}")
    xyz = np.concatenate([c.xyz for c in clouds])
    has_int = all(c.intensity is not None for c in clouds)
    keys = voxel_keys(xyz, voxel_size)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n = counts.size
    out = np.column_stack([np.bincount(inv, weights=xyz[:, d], minlength=n) for d in range(3)])
    out /= counts[:, None]
    inten = None
    if has_int:
        inten = np.bincount(inv, weights=np.concatenate([c.intensity for c in clouds]), minlength=n) / counts
        inten = np.clip(inten, 0.0, 1.0)
    return PointCloud(out, inten, None, "reference")


def euclidean_clusters(xyz, cluster_radius):
    """Label points so two share a label iff linked by hops of at most ``cluster_radius``."""
    xyz = np.asarray(xyz, np.float64)
    n = len(xyz)
    pairs = cKDTree(xyz).query_pairs(cluster_radius, output_type="ndarray").reshape(-1, 2)
    g = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(g, directed=False)
    return labels


def segment_keep_part(c: PointCloud, target_centres, cluster_radius: float = 0.2,
                      keep_radius: float = 5.0, return_labels=False):
    """Keep every cluster holding a point within ``keep_radius`` of some target."""
    T = np.asarray(target_centres, np.float64).reshape(-1, 3)
    if len(T) == 0:
        raise DataError("segmentation needs at least one target")
    if not (cluster_radius > 0 and keep_radius > 0):
        raise ValueError("cluster_radius and keep_radius must be positive")
    labels = euclidean_clusters(c.xyz, cluster_radius)
    near = cKDTree(c.xyz).query_ball_point(T, keep_radius)
    hit = np.unique(np.concatenate([labels[np.asarray(v, dtype=np.int64)] for v in near]))
    if hit.size == 0:
        raise DataError("no cluster lies near any target; check that targets and cloud share a frame")
    keep = np.flatnonzero(np.isin(labels, hit))
    out = c.subset(keep)
    if return_labels:
        return out, labels, hit
    return out
