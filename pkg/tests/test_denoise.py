import numpy as np
import pytest
from hypothesis import given, strategies as st

from scanrecon.core import PointCloud
from scanrecon.denoise import REL_TOL, mean_knn_distance, remove_outliers
from scanrecon.errors import DataError


def grid(n=10, spacing=1.0):
    g = np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"), -1).reshape(-1, 2) * spacing
    return np.column_stack([g, np.zeros(len(g))])


def brute_mean_knn(X, k):
    d = np.linalg.norm(X[:, None] - X[None], axis=2)
    d.sort(axis=1)
    return d[:, 1:k + 1].mean(axis=1)


def test_grid_matches_brute_force_rule():
    # On a finite grid the corners and edges have larger k-NN distances than the
    # interior, so sigma is not 0; the oracle decides exactly which points go.
    X = grid()
    _, removed = remove_outliers(PointCloud(X), 4, 1.0)
    d = brute_mean_knn(X, 4)
    assert np.array_equal(removed, np.flatnonzero(d > d.mean() + d.std()))


def test_uniform_distances_remove_nothing():
    # every point sees identical neighbourhoods: a ring on a circle
    a = np.linspace(0, 2 * np.pi, 100, endpoint=False)
    X = np.column_stack([np.cos(a), np.sin(a), np.zeros_like(a)]) * 50
    _, removed = remove_outliers(PointCloud(X), 4, 1.0)
    assert removed.size == 0


def test_grid_plus_far_point():
    X = np.vstack([grid(), [[4.5, 4.5, 100.0]]])
    _, removed = remove_outliers(PointCloud(X), 4, 1.0)
    d = brute_mean_knn(X, 4)
    exceed = np.flatnonzero(d > d.mean() + d.std())
    assert np.array_equal(exceed, [100])
    assert np.array_equal(removed, [100])


def test_simulator_patch_outliers():
    from scanrecon import synth
    sc = synth.flat_scene(25, 20, 0.5, [])
    rp = synth.render_pass(sc, 0)
    X = rp.cloud.xyz
    rng = np.random.default_rng(3)
    # 25 injected outliers lifted >= 20x the 0.5 mm spacing off the plate
    out = np.column_stack([rng.uniform(0, 10, 25), rng.uniform(0, 12, 25),
                           rng.choice([-1, 1], 25) * rng.uniform(10, 40, 25)])
    c = PointCloud(np.vstack([X, out]))
    _, removed = remove_outliers(c, 30, 1.0)
    labels = np.arange(len(c)) >= len(X)
    assert labels[removed].sum() == 25
    assert (~labels[removed]).sum() <= 5


def test_order_preserved_and_counts(rng):
    X = rng.normal(size=(200, 3))
    c = PointCloud(X, rng.uniform(size=200), "s")
    kept, removed = remove_outliers(c, 8, 1.0)
    keep = np.setdiff1d(np.arange(200), removed)
    assert np.array_equal(kept.xyz, X[keep]) and kept.scan_id == "s"
    assert len(kept) + removed.size == 200


def test_too_few_points():
    with pytest.raises(DataError):
        remove_outliers(PointCloud(np.zeros((3, 3))), 4)


def test_infinite_alpha_keeps_all(rng):
    _, removed = remove_outliers(PointCloud(rng.normal(size=(50, 3))), 5, np.inf)
    assert removed.size == 0


@given(st.integers(20, 120), st.integers(1, 10), st.floats(0.0, 3.0), st.integers(0, 2**31))
def test_removal_is_threshold_rule(n, k, alpha, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    _, removed = remove_outliers(PointCloud(X), k, alpha)
    d = mean_knn_distance(X, k)
    assert np.array_equal(removed, np.flatnonzero(d > d.mean() + alpha * d.std() + REL_TOL * d.mean()))


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 2**31))
def test_monotone_in_alpha(a1, a2, seed):
    X = np.random.default_rng(seed).normal(size=(80, 3))
    lo, hi = sorted((a1, a2))
    _, r_lo = remove_outliers(PointCloud(X), 6, lo)
    _, r_hi = remove_outliers(PointCloud(X), 6, hi)
    assert set(r_hi) <= set(r_lo)
