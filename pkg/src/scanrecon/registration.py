"""Target-based registration: filtering, matching, rigid fits, joint refinement.

Frames: every target centre handed to this module is in its scan's
coarse-aligned frame. The unknowns are per-scan *corrections* ``C_s`` that
map coarse-aligned coordinates into the reference frame; the reference scan
is pinned to ``C_ref = I``. A scan's final pose is ``C_s @ coarse_pose_s``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from scanrecon.core import RigidTransform, compose, exp_so3, left_jacobian_so3, skew
from scanrecon.errors import ConvergenceError, DataError

log = logging.getLogger(__name__)


class OverlapRejected(Exception):
    """A scan pair does not qualify as an overlap edge (not fatal for the job)."""


class AmbiguousMatch(OverlapRejected):
    """Two equally large displacement clusters; a smaller epsilon is needed."""


@dataclass(frozen=True)
class TargetMatch:
    scan_a: str
    scan_b: str
    target_a: int
    target_b: int
    residual_mm: float = float("nan")

    def to_dict(self):
        return {"scan_a": self.scan_a, "scan_b": self.scan_b, "target_a": self.target_a,
                "target_b": self.target_b, "residual_mm": float(self.residual_mm)}


@dataclass
class OverlapGraph:
    nodes: List[str]
    edges: Dict[Tuple[str, str], List[TargetMatch]] = field(default_factory=dict)

    def add_edge(self, a, b, matches):
        if len(matches) < 3:
            raise ValueError("an overlap edge needs at least 3 matches")
        self.edges[(a, b)] = list(matches)

    def components(self) -> List[List[str]]:
        index = {s: i for i, s in enumerate(self.nodes)}
        n = len(self.nodes)
        if not self.edges:
            return [[s] for s in self.nodes]
        rows = [index[a] for a, _ in self.edges]
        cols = [index[b] for _, b in self.edges]
        g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(g, directed=False)
        comps = {}
        for s, lab in zip(self.nodes, labels):
            comps.setdefault(lab, []).append(s)
        return sorted(comps.values(), key=lambda c: self.nodes.index(c[0]))

    def is_connected(self):
        return len(self.components()) == 1


# -- rigid fit ---------------------------------------------------------------

def _as_pairs(src, dst):
    if dst is None:
        pairs = list(src)
        if not pairs:
            return np.zeros((0, 3)), np.zeros((0, 3))
        src = np.array([p for p, _ in pairs], dtype=np.float64)
        dst = np.array([q for _, q in pairs], dtype=np.float64)
    return np.asarray(src, np.float64).reshape(-1, 3), np.asarray(dst, np.float64).reshape(-1, 3)


def estimate_rigid(src, dst=None) -> RigidTransform:
    """Least-squares rigid motion with ``T(src) ~ dst`` via SVD of the cross-covariance.

    Accepts two ``(n, 3)`` arrays or a single sequence of ``(p, q)`` pairs.
    """
    P, Q = _as_pairs(src, dst)
    if P.shape != Q.shape:
        raise ValueError("point sets differ in size")
    if P.shape[0] < 3:
        raise DataError(f"need at least 3 point pairs, got {P.shape[0]}")
    pc, qc = P.mean(axis=0), Q.mean(axis=0)
    H = (P - pc).T @ (Q - qc)
    U, s, Vt = np.linalg.svd(H)
    if s[0] <= 0.0:
        raise DataError("degenerate correspondences: all points coincide")
    if s[1] <= 1e-12 * s[0]:
        raise DataError("degenerate correspondences: points are collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, qc - R @ pc)


def rigid_residuals(T: RigidTransform, src, dst=None):
    P, Q = _as_pairs(src, dst)
    return np.linalg.norm(T.transform_points(P) - Q, axis=1)


def rmse(T, src, dst=None):
    r = rigid_residuals(T, src, dst)
    return float(np.sqrt(np.mean(r**2))) if r.size else 0.0


# -- filtering ---------------------------------------------------------------

def _pair_distances(X):
    i, j = np.triu_indices(X.shape[0], k=1)
    return i, j, np.linalg.norm(X[i] - X[j], axis=1)


def _distance_matched(d, ref_sorted, tau):
    if ref_sorted.size == 0:
        return np.zeros(d.shape, dtype=bool)
    k = np.searchsorted(ref_sorted, d)
    lo = np.abs(d - ref_sorted[np.clip(k - 1, 0, ref_sorted.size - 1)])
    hi = np.abs(d - ref_sorted[np.clip(k, 0, ref_sorted.size - 1)])
    return np.minimum(lo, hi) <= tau


def filter_target_indices(A, B, tau=0.2, min_support=2):
    """Indices of targets in ``A`` and ``B`` backed by >= min_support matched distances."""
    A = np.asarray(A, np.float64).reshape(-1, 3)
    B = np.asarray(B, np.float64).reshape(-1, 3)
    if len(A) < 2 or len(B) < 2:
        raise OverlapRejected(f"need >= 2 targets per scan, got {len(A)} and {len(B)}")
    ia, ja, da = _pair_distances(A)
    ib, jb, db = _pair_distances(B)
    ma = _distance_matched(da, np.sort(db), tau)
    mb = _distance_matched(db, np.sort(da), tau)
    sa = np.bincount(ia[ma], minlength=len(A)) + np.bincount(ja[ma], minlength=len(A))
    sb = np.bincount(ib[mb], minlength=len(B)) + np.bincount(jb[mb], minlength=len(B))
    keep_a, keep_b = np.flatnonzero(sa >= min_support), np.flatnonzero(sb >= min_support)
    if len(keep_a) < 3 or len(keep_b) < 3:
        raise OverlapRejected(f"only {len(keep_a)} and {len(keep_b)} targets survive filtering")
    return keep_a, keep_b


def filter_targets(a, b, tau=0.2, min_support=2):
    """Drop targets whose inter-target distances find no counterpart in the other scan."""
    ka, kb = filter_target_indices(_centres(a), _centres(b), tau, min_support)
    return [a[i] for i in ka], [b[j] for j in kb]


def _centres(ts):
    return np.array([t.center3d for t in ts], dtype=np.float64).reshape(-1, 3)


# -- matching ----------------------------------------------------------------

def _displacement_clusters(A, B, epsilon, search_radius):
    """Single-linkage clusters of candidate displacements, largest first."""
    m = len(B)
    if search_radius is None:
        ii, jj = np.divmod(np.arange(len(A) * m), m)
    else:
        near = cKDTree(B).query_ball_point(A, search_radius)
        ii = np.repeat(np.arange(len(A)), [len(v) for v in near])
        jj = np.array([j for v in near for j in sorted(v)], dtype=np.int64)
    if ii.size == 0:
        return ii, jj, np.zeros((0, 3)), []
    V = B[jj] - A[ii]
    links = cKDTree(V).query_pairs(epsilon, output_type="ndarray").reshape(-1, 2)
    g = coo_matrix((np.ones(len(links)), (links[:, 0], links[:, 1])), shape=(len(V), len(V)))
    _, labels = connected_components(g, directed=False)
    sizes = np.bincount(labels)
    _, first = np.unique(labels, return_index=True)
    order = np.lexsort((first, -sizes))
    return ii, jj, V, [np.flatnonzero(labels == c) for c in order[:8]]


def _one_to_one(ii, jj, V, members):
    consensus = V[members].mean(axis=0)
    dev = np.linalg.norm(V[members] - consensus, axis=1)
    mi, mj = ii[members], jj[members]
    used_a, used_b, out = set(), set(), []
    for k in np.lexsort((mj, mi, dev)):
        i, j = int(mi[k]), int(mj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    out.sort()
    return out, consensus


def match_target_indices(A, B, epsilon=0.5, coarse: Optional[RigidTransform] = None,
                         search_radius: Optional[float] = None):
    """One-to-one pairs ``(i, j)`` agreeing on a common displacement ``B[j] - T(A[i])``.

    Candidate pairs farther apart than ``search_radius`` (if given) are not
    considered. Returns ``(pairs, consensus)``. Raises
    :class:`OverlapRejected` if the largest displacement cluster has fewer
    than 3 members and :class:`AmbiguousMatch` if two clusters tie for
    largest; the latter carries the tied candidates in ``.candidates``.
    """
    A = np.asarray(A, np.float64).reshape(-1, 3)
    B = np.asarray(B, np.float64).reshape(-1, 3)
    if coarse is not None:
        A = coarse.transform_points(A)
    if len(A) == 0 or len(B) == 0:
        raise OverlapRejected("no targets to match")
    ii, jj, V, clusters = _displacement_clusters(A, B, epsilon, search_radius)
    best = len(clusters[0]) if clusters else 0
    if best < 3:
        raise OverlapRejected(f"largest displacement cluster has {best} members (< 3)")
    tied = [c for c in clusters if len(c) == best]
    if len(tied) > 1:
        err = AmbiguousMatch(f"{len(tied)} displacement clusters of size {best}; use a smaller epsilon")
        err.candidates = [_one_to_one(ii, jj, V, c) for c in tied]
        raise err
    out, consensus = _one_to_one(ii, jj, V, clusters[0])
    if len(out) < 3:
        raise OverlapRejected(f"only {len(out)} one-to-one matches in the consensus cluster")
    return out, consensus


def match_targets(a, b, coarse: Optional[RigidTransform] = None, epsilon=0.5,
                  scan_a=None, scan_b=None, search_radius=None) -> List[TargetMatch]:
    """Match filtered targets (same list indices as given) under a pure translation."""
    pairs, _ = match_target_indices(_centres(a), _centres(b), epsilon, coarse, search_radius)
    sa = scan_a if scan_a is not None else (a[0].scan_id if a else None)
    sb = scan_b if scan_b is not None else (b[0].scan_id if b else None)
    return [TargetMatch(sa, sb, i, j) for i, j in pairs]


@dataclass
class PairResult:
    scan_a: str
    scan_b: str
    matches: List[TargetMatch]
    transform: RigidTransform  # coarse frame of a -> coarse frame of b
    rmse: float
    rounds: int
    tie_resolved: bool = False


def _fit_consistent(Af, Bf, pairs, tol):
    """Rigid fit dropping the worst pair while any residual exceeds ``tol``."""
    pairs = list(pairs)
    while len(pairs) >= 3:
        ii = np.array([p[0] for p in pairs])
        jj = np.array([p[1] for p in pairs])
        try:
            T = estimate_rigid(Af[ii], Bf[jj])
        except DataError:
            return None, pairs
        res = rigid_residuals(T, Af[ii], Bf[jj])
        k = int(np.argmax(res))
        if res[k] <= tol:
            return T, pairs
        pairs.pop(k)
    return None, pairs


def _iterate_matches(Af, Bf, T, epsilon, search_radius, tol, max_rounds):
    prev = None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        pairs, _ = match_target_indices(Af, Bf, epsilon, T, search_radius)
        T_new, pairs = _fit_consistent(Af, Bf, pairs, tol)
        if T_new is None:
            raise OverlapRejected("fewer than 3 rigidly consistent matches")
        T = T_new
        if pairs == prev:
            break
        prev = pairs
    return T, pairs, rounds


def register_pair(A, B, scan_a="a", scan_b="b", tau=0.2, epsilon=0.5, min_support=2,
                  search_radius=10.0, max_rounds=10) -> PairResult:
    """Filter, match, fit, then re-match with the fitted motion until the set is stable.

    The pure-translation assumption only holds locally when the coarse
    rotation error is not negligible over the overlap, so the first
    consensus cluster may hold a subset of the true pairs. Matching again
    after applying the fitted motion recovers the rest. Matches must agree
    with the fitted rigid motion to within ``tau``, the same tolerance used
    for comparing distances. A first-round tie between clusters is settled
    only if exactly one of them grows to the largest rigid match set.
    """
    A = np.asarray(A, np.float64).reshape(-1, 3)
    B = np.asarray(B, np.float64).reshape(-1, 3)
    ka, kb = filter_target_indices(A, B, tau, min_support)
    Af, Bf = A[ka], B[kb]
    tie = False
    try:
        pairs, _ = match_target_indices(Af, Bf, epsilon, None, search_radius)
        seeds = [pairs]
    except AmbiguousMatch as e:
        seeds = [c[0] for c in e.candidates]
        tie = True
    results = []
    for seed in seeds:
        T, _ = _fit_consistent(Af, Bf, seed, tau)
        if T is None:
            continue
        try:
            results.append(_iterate_matches(Af, Bf, T, epsilon, search_radius, tau, max_rounds))
        except OverlapRejected:
            continue
    if not results:
        raise OverlapRejected("no rigidly consistent match set")
    results.sort(key=lambda r: -len(r[1]))
    if len(results) > 1 and len(results[0][1]) == len(results[1][1]) and results[0][1] != results[1][1]:
        raise AmbiguousMatch("tied displacement clusters stay tied after rigid re-matching; "
                             "use a smaller epsilon")
    T, pairs, rounds = results[0]
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    res = rigid_residuals(T, Af[ii], Bf[jj])
    err = float(np.sqrt(np.mean(res**2)))
    matches = [TargetMatch(scan_a, scan_b, int(ka[i]), int(kb[j]), float(r))
               for i, j, r in zip(ii, jj, res)]
    return PairResult(scan_a, scan_b, matches, T, err, rounds, tie)


# -- joint refinement ---------------------------------------------------------

class ResidualModel:
    """Stacked match residuals ``C_a(p) - C_b(q)`` as a function of scan parameters.

    Each non-reference scan owns 6 parameters: axis-angle then translation
    of its correction. The reference scan is fixed at the identity.
    """

    def __init__(self, scans: Sequence[str], reference: str, P, Q, ia, ib):
        self.scans = list(scans)
        self.reference = reference
        self.free = [s for s in self.scans if s != reference]
        self.slot = {s: k for k, s in enumerate(self.free)}
        self.P = np.asarray(P, np.float64).reshape(-1, 3)
        self.Q = np.asarray(Q, np.float64).reshape(-1, 3)
        self.ia = np.asarray(ia, np.int64)  # scan index (into self.scans) of P rows
        self.ib = np.asarray(ib, np.int64)
        self.nparam = 6 * len(self.free)

    def unpack(self, x) -> Dict[str, RigidTransform]:
        out = {self.reference: RigidTransform.identity()}
        for s, k in self.slot.items():
            out[s] = RigidTransform.from_params(x[6 * k:6 * k + 6])
        return out

    def pack(self, transforms: Dict[str, RigidTransform]):
        x = np.zeros(self.nparam)
        for s, k in self.slot.items():
            x[6 * k:6 * k + 6] = transforms[s].params()
        return x

    def _rot(self, x):
        Rs = np.empty((len(self.scans), 3, 3))
        ts = np.zeros((len(self.scans), 3))
        for n, s in enumerate(self.scans):
            if s in self.slot:
                k = self.slot[s]
                Rs[n] = exp_so3(x[6 * k:6 * k + 3])
                ts[n] = x[6 * k + 3:6 * k + 6]
            else:
                Rs[n] = np.eye(3)
        return Rs, ts

    def residual(self, x):
        Rs, ts = self._rot(x)
        pa = np.einsum("nij,nj->ni", Rs[self.ia], self.P) + ts[self.ia]
        pb = np.einsum("nij,nj->ni", Rs[self.ib], self.Q) + ts[self.ib]
        return (pa - pb).reshape(-1)

    def jacobian(self, x):
        """Analytic d r / d x, dense ``(3M, nparam)``."""
        Rs, _ = self._rot(x)
        M = self.P.shape[0]
        J = np.zeros((3 * M, self.nparam))
        Jl = {}
        for s, k in self.slot.items():
            Jl[s] = left_jacobian_so3(x[6 * k:6 * k + 3])
        rows = np.arange(M)
        for pts, idx, sign in ((self.P, self.ia, 1.0), (self.Q, self.ib, -1.0)):
            for n, s in enumerate(self.scans):
                if s not in self.slot:
                    continue
                sel = rows[idx == n]
                if sel.size == 0:
                    continue
                k = self.slot[s]
                rp = pts[sel] @ Rs[n].T
                for r_i, v in zip(sel, rp):
                    J[3 * r_i:3 * r_i + 3, 6 * k:6 * k + 3] += sign * (-skew(v) @ Jl[s])
                    J[3 * r_i:3 * r_i + 3, 6 * k + 3:6 * k + 6] += sign * np.eye(3)
        return J

    def cost(self, x):
        r = self.residual(x)
        return 0.5 * float(r @ r)


def numeric_jacobian(model: ResidualModel, x, h=1e-6):
    """Central finite differences of the residual."""
    x = np.asarray(x, np.float64)
    J = np.zeros((model.residual(x).size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (model.residual(x + e) - model.residual(x - e)) / (2 * h)
    return J


@dataclass
class RefineResult:
    transforms: Dict[str, RigidTransform]
    cost_history: List[float]
    iterations: int
    gradient_norm: float
    converged_by: str


def levenberg_marquardt(model: ResidualModel, x0, max_iters=100, rel_tol=1e-12, grad_tol=1e-10,
                        lam0=1e-3) -> RefineResult:
    x = np.asarray(x0, np.float64).copy()
    r = model.residual(x)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = lam0
    g = np.zeros_like(x)
    for it in range(1, max_iters + 1):
        J = model.jacobian(x)
        g = J.T @ r
        gn = float(np.linalg.norm(g))
        if gn < grad_tol or cost == 0.0:
            return RefineResult(model.unpack(x), history, it - 1, gn, "gradient")
        A = J.T @ J
        dA = np.diag(A).copy()
        dA[dA <= 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(dA), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            xn = x + step
            rn = model.residual(xn)
            cn = 0.5 * float(rn @ rn)
            if cn <= cost:
                break
            lam *= 4.0
            if lam > 1e16 or np.linalg.norm(step) <= 1e-15 * (np.linalg.norm(x) + 1e-15):
                # no downhill step exists at working precision
                return RefineResult(model.unpack(x), history, it, gn, "step")
        decrease = cost - cn
        x, r, cost = xn, rn, cn
        history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if decrease <= rel_tol * history[-2]:
            J = model.jacobian(x)
            return RefineResult(model.unpack(x), history, it, float(np.linalg.norm(J.T @ r)), "cost")
    J = model.jacobian(x)
    gn = float(np.linalg.norm(J.T @ r))
    raise ConvergenceError(f"refinement did not converge in {max_iters} iterations "
                           f"(gradient norm {gn:.3e}, cost {cost:.3e})")


def build_model(graph: OverlapGraph, targets: Dict[str, np.ndarray], reference: str) -> ResidualModel:
    P, Q, ia, ib = [], [], [], []
    index = {s: n for n, s in enumerate(graph.nodes)}
    for (a, b), ms in sorted(graph.edges.items()):
        for mt in ms:
            P.append(targets[a][mt.target_a])
            Q.append(targets[b][mt.target_b])
            ia.append(index[a])
            ib.append(index[b])
    return ResidualModel(graph.nodes, reference, np.array(P).reshape(-1, 3),
                         np.array(Q).reshape(-1, 3), ia, ib)


def spanning_tree_init(graph: OverlapGraph, pairwise: Dict[Tuple[str, str], RigidTransform],
                       reference: str) -> Dict[str, RigidTransform]:
    """Chain pairwise fits along the spanning tree with the most matches.

    ``pairwise[(a, b)]`` maps the coarse frame of ``a`` into that of ``b``.
    """
    comps = graph.components()
    if len(comps) > 1:
        listing = "; ".join("{" + ", ".join(c) + "}" for c in comps)
        raise DataError(f"overlap graph is disconnected: {len(comps)} components: {listing}")
    index = {s: n for n, s in enumerate(graph.nodes)}
    n = len(graph.nodes)
    rows, cols, w = [], [], []
    for (a, b), ms in graph.edges.items():
        rows.append(index[a])
        cols.append(index[b])
        w.append(-float(len(ms)))  # maximum spanning tree
    tree = minimum_spanning_tree(coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr())
    tree = tree + tree.T
    order, parent = breadth_first_order(tree, index[reference], directed=False)
    out = {reference: RigidTransform.identity()}
    for node in order[1:]:
        child, par = graph.nodes[node], graph.nodes[parent[node]]
        if (child, par) in pairwise:
            out[child] = compose(out[par], pairwise[(child, par)])
        else:
            out[child] = compose(out[par], pairwise[(par, child)].inverse())
    return out


def refine_global(graph: OverlapGraph, targets: Dict[str, np.ndarray],
                  initial: Dict[str, RigidTransform], reference: str,
                  max_iters=100) -> RefineResult:
    """Jointly minimise the squared match distances over all scan corrections."""
    comps = graph.components()
    if len(comps) > 1:
        listing = "; ".join("{" + ", ".join(c) + "}" for c in comps)
        raise DataError(f"overlap graph is disconnected: {len(comps)} components: {listing}")
    model = build_model(graph, targets, reference)
    return levenberg_marquardt(model, model.pack(initial), max_iters=max_iters)


def match_residuals(graph: OverlapGraph, targets, transforms):
    """Per-edge arrays of post-alignment match distances."""
    out = {}
    for (a, b), ms in sorted(graph.edges.items()):
        P = np.array([targets[a][m.target_a] for m in ms])
        Q = np.array([targets[b][m.target_b] for m in ms])
        out[(a, b)] = np.linalg.norm(transforms[a].transform_points(P) - transforms[b].transform_points(Q), axis=1)
    return out


@dataclass
class Registration:
    reference: str
    graph: OverlapGraph
    corrections: Dict[str, RigidTransform]
    initial: Dict[str, RigidTransform]
    refine: RefineResult
    pairs: Dict[Tuple[str, str], PairResult]
    rejected: Dict[Tuple[str, str], str]
    residuals_before: Dict[Tuple[str, str], np.ndarray]
    residuals_after: Dict[Tuple[str, str], np.ndarray]

    @property
    def max_residual(self):
        vals = [r.max() for r in self.residuals_after.values() if r.size]
        return float(max(vals)) if vals else 0.0

    def report(self):
        edges = []
        for key in sorted(self.graph.edges):
            before, after = self.residuals_before[key], self.residuals_after[key]
            edges.append({
                "scan_a": key[0], "scan_b": key[1],
                "matches": len(self.graph.edges[key]),
                "rmse_before_mm": float(np.sqrt(np.mean(before**2))),
                "rmse_after_mm": float(np.sqrt(np.mean(after**2))),
                "max_after_mm": float(after.max()),
            })
        return {
            "reference": self.reference,
            "edges": edges,
            "rejected_pairs": [{"scan_a": a, "scan_b": b, "reason": why}
                               for (a, b), why in sorted(self.rejected.items())],
            "max_residual_mm": self.max_residual,
            "iterations": self.refine.iterations,
            "cost_history": [float(c) for c in self.refine.cost_history],
            "gradient_norm": float(self.refine.gradient_norm),
            "converged_by": self.refine.converged_by,
        }


def register(targets: Dict[str, np.ndarray], reference: Optional[str] = None, tau=0.2, epsilon=0.5,
             min_support=2, max_iters=100, search_radius=10.0,
             scans: Optional[List[str]] = None) -> Registration:
    """Full registration from coarse-frame target centres per scan."""
    scans = list(scans) if scans is not None else list(targets)
    if not scans:
        raise DataError("no scans to register")
    reference = reference if reference is not None else scans[0]
    if reference not in scans:
        raise DataError(f"reference scan {reference!r} not in job")
    graph = OverlapGraph(scans)
    pairs, rejected = {}, {}
    for a, b in itertools.combinations(scans, 2):
        try:
            pr = register_pair(targets[a], targets[b], a, b, tau, epsilon, min_support, search_radius)
        except (OverlapRejected, DataError) as e:
            rejected[(a, b)] = str(e)
            continue
        graph.add_edge(a, b, pr.matches)
        pairs[(a, b)] = pr
    initial = spanning_tree_init(graph, {k: p.transform for k, p in pairs.items()}, reference)
    coarse = {s: RigidTransform.identity() for s in scans}
    res = refine_global(graph, targets, initial, reference, max_iters)
    before = match_residuals(graph, targets, coarse)
    after = match_residuals(graph, targets, res.transforms)
    for key, ms in graph.edges.items():
        graph.edges[key] = [TargetMatch(m.scan_a, m.scan_b, m.target_a, m.target_b, float(r))
                            for m, r in zip(ms, after[key])]
    return Registration(reference, graph, res.transforms, initial, res, pairs, rejected, before, after)
