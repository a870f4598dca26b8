"""Statistical outlier removal on a single scan."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from scanrecon.core import PointCloud
from scanrecon.errors import DataError

REL_TOL = 1e-9


def mean_knn_distance(xyz, k, workers=1):
    """Mean distance from each point to its ``k`` nearest other points."""
    tree = cKDTree(xyz)
    d, _ = tree.query(xyz, k=k + 1, workers=workers)
    # column 0 is the point itself (or an exact duplicate, same distance 0)
    return d[:, 1:].mean(axis=1)


def remove_outliers(c: PointCloud, k_neighbors: int = 30, alpha: float = 1.0, workers: int = 1):
    """Drop points whose mean k-NN distance exceeds ``mu + alpha * sigma``.

    Returns the surviving cloud (order preserved) and the removed indices.
    """
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = len(c)
    if n <= k_neighbors:
        raise DataError(f"cloud has {n} points, need more than k_neighbors={k_neighbors}")
    d = mean_knn_distance(c.xyz, k_neighbors, workers)
    mu, sigma = d.mean(), d.std()
    if np.isinf(alpha):
        removed = np.zeros(n, dtype=bool)
    else:
        # rounding in equal-looking neighbourhoods gives sigma ~ 1e-16, not 0
        removed = d > mu + alpha * sigma + REL_TOL * mu
    keep = np.flatnonzero(~removed)
    return c.subset(keep), np.flatnonzero(removed)
