"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np

from scanrecon.core import RigidTransform, exp_so3
from scanrecon.registration import OverlapGraph, TargetMatch

# closed unit tetrahedron, outward winding
TET_V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
TET_F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


def kabsch_batch(P, Q):
    """Best rotation/translation for every batch slice, plain Kabsch with det fix.

    P, Q: (B, n, 3). Returns R (B, 3, 3), t (B, 3), rmse (B,).
    """
    pc, qc = P.mean(axis=1, keepdims=True), Q.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", P - pc, Q - qc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", U, Vt)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1
    D[:, 1, 1] = 1
    D[:, 2, 2] = d
    R = np.einsum("bji,bjk,blk->bil", Vt, D, U)  # V D U^T
    t = qc[:, 0] - np.einsum("bij,bj->bi", R, pc[:, 0])
    res = np.einsum("bij,bnj->bni", R, P) + t[:, None] - Q
    return R, t, np.sqrt((res**2).sum(axis=2).mean(axis=1))


def brute_force_assignment(A, B):
    """All injective maps A -> B (|A| <= |B|); returns sorted (best, second) by RMSE."""
    n, m = len(A), len(B)
    perms = np.array(list(itertools.permutations(range(m), n)))
    P = np.broadcast_to(A, (len(perms), n, 3))
    Q = B[perms]
    _, _, err = kabsch_batch(P, Q)
    order = np.argsort(err, kind="stable")
    best = [(i, int(j)) for i, j in enumerate(perms[order[0]])]
    gap = float(err[order[1]] - err[order[0]]) if len(order) > 1 else np.inf
    return best, float(err[order[0]]), gap


def spaced_points(rng, n, box, min_sep, dim_z=5.0):
    pts = []
    while len(pts) < n:
        p = np.array([rng.uniform(0, box), rng.uniform(0, box), rng.uniform(0, dim_z)])
        if all(np.linalg.norm(p - q) >= min_sep for q in pts):
            pts.append(p)
    return np.array(pts)


def matching_scene(rng, n_max=7, box=30.0, min_sep=8.0, max_deg=2.0, noise=0.02):
    n = int(rng.integers(3, n_max + 1))
    A = spaced_points(rng, n, box, min_sep)
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    R = exp_so3(ax * np.deg2rad(rng.uniform(0, max_deg)))
    c = A.mean(axis=0)
    t = rng.uniform(-20, 20, 3)
    B = (A - c) @ R.T + c + t + rng.normal(0, noise, A.shape)
    perm = rng.permutation(n)
    Bp = np.empty_like(B)
    Bp[perm] = B
    truth = sorted((i, int(perm[i])) for i in range(n))
    return A, Bp, truth


def fib_sphere(n, r=10.0):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = np.pi * (1 + 5**0.5) * k
    u = np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])
    return r * u, u


def chain_job(rng, n_scans=3, noise=0.0, n_shared=5):
    """Scans seeing a common target field through known poses; corrections = inverse poses."""
    W = spaced_points(rng, 4 * n_scans + n_shared, 200, 10)
    poses = {f"s{k}": RigidTransform.identity() if k == 0 else
             RigidTransform(exp_so3(rng.normal(size=3) * 0.01), rng.normal(size=3)) for k in range(n_scans)}
    targets, graph = {}, OverlapGraph(list(poses))
    vis = {s: np.arange(4 * k, 4 * k + 4 + n_shared) for k, s in enumerate(poses)}
    for s, T in poses.items():
        targets[s] = T.inverse().transform_points(W[vis[s]]) + rng.normal(0, noise, (len(vis[s]), 3))
    for a, b in itertools.combinations(poses, 2):
        common = np.intersect1d(vis[a], vis[b])
        if common.size >= 3:
            ms = [TargetMatch(a, b, int(np.flatnonzero(vis[a] == w)[0]), int(np.flatnonzero(vis[b] == w)[0]))
                  for w in common]
            graph.add_edge(a, b, ms)
    return poses, targets, graph
