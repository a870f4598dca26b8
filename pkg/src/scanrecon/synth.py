"""Synthetic line-scanner passes over a welded plate, with ground truth.

The part occupies ``0 <= x <= L``, ``0 <= y <= W`` and
``-T - b(x) <= z <= b(x)`` where ``b`` is a Gaussian weld bead running
across the width at ``x = bead_x`` on both faces. The scanner is modelled
as orthographic: pixel ``(r, c)`` of a pass is the ray through scanner-local
``(c * pitch_x, r * pitch_y)`` travelling along local ``-z``. The recorded
point is the scanner-local hit, so ``x, y`` are exactly the grid position.

Targets are flat discs on planar faces. Their backscatter is a disc edge
blurred by a Gaussian laser spot, which keeps the rendered image smooth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.special import ndtr

from scanrecon.core import PointCloud, RigidTransform, compose, exp_so3, rot_x
from scanrecon.errors import DataError
from scanrecon.ingest import RangeImage, build_range_image, write_poses, write_scan

FACES = ("x0", "xL", "y0", "yW", "top", "bottom")
FACE_NORMALS = {
    "x0": (-1.0, 0.0, 0.0), "xL": (1.0, 0.0, 0.0),
    "y0": (0.0, -1.0, 0.0), "yW": (0.0, 1.0, 0.0),
    "top": (0.0, 0.0, 1.0), "bottom": (0.0, 0.0, -1.0),
}
FIXTURE_BASE = 100
STANDOFF = 400.0


@dataclass
class PartSpec:
    length: float = 570.0
    width: float = 100.0
    thickness: float = 20.0
    bead_x: float = 285.0
    bead_height: float = 2.0
    bead_width: float = 10.0  # full width at half maximum

    def bead(self, x):
        if self.bead_height == 0.0:
            return np.zeros_like(np.asarray(x, dtype=float))
        s = self.bead_width / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        return self.bead_height * np.exp(-0.5 * ((np.asarray(x) - self.bead_x) / s) ** 2)

    def bead_slope(self, x):
        if self.bead_height == 0.0:
            return np.zeros_like(np.asarray(x, dtype=float))
        s = self.bead_width / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        return -self.bead(x) * (np.asarray(x) - self.bead_x) / s**2


@dataclass
class TargetSpec:
    center: List[float]
    face: str
    radius: float = 4.0
    contrast: float = 0.6


@dataclass
class FixtureBlob:
    lo: List[float]
    hi: List[float]
    intensity: float = 0.35


@dataclass
class PassSpec:
    scan_id: str
    rotation: List[float]  # row-major true scanner-local -> world rotation
    translation: List[float]
    rows: int
    cols: int
    pitch_x: float = 0.5
    pitch_y: float = 0.5

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(np.reshape(self.rotation, (3, 3)), self.translation)


@dataclass
class SceneSpec:
    part: PartSpec = field(default_factory=PartSpec)
    targets: List[TargetSpec] = field(default_factory=list)
    fixtures: List[FixtureBlob] = field(default_factory=list)
    passes: List[PassSpec] = field(default_factory=list)
    depth_noise: float = 0.02
    outlier_frac: float = 0.0
    outlier_offset: List[float] = field(default_factory=lambda: [10.0, 40.0])
    dropout_frac: float = 0.0
    background: float = 0.2
    spot_blur: float = 0.75
    pose_error_deg: float = 0.5
    pose_error_mm: float = 1.0
    overlaps: List[List[str]] = field(default_factory=list)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["part"] = PartSpec(**d["part"])
        d["targets"] = [TargetSpec(**t) for t in d["targets"]]
        d["fixtures"] = [FixtureBlob(**f) for f in d["fixtures"]]
        d["passes"] = [PassSpec(**p) for p in d["passes"]]
        return cls(**d)


def make_pass(scan_id, view_dir, travel_dir, look_at, fov, length, pitch_x=0.5, pitch_y=0.5):
    """Pass whose raster centre looks at ``look_at`` along ``view_dir``."""
    d = np.asarray(view_dir, float)
    d /= np.linalg.norm(d)
    u = np.asarray(travel_dir, float)
    u = u - (u @ d) * d
    u /= np.linalg.norm(u)
    z = -d
    x = np.cross(u, z)
    R = np.column_stack([x, u, z])
    cols = int(round(fov / pitch_x))
    rows = int(round(length / pitch_y))
    centre_local = np.array([(cols - 1) * pitch_x / 2.0, (rows - 1) * pitch_y / 2.0, 0.0])
    t = np.asarray(look_at, float) - R @ centre_local
    return PassSpec(scan_id, R.reshape(-1).tolist(), t.tolist(), rows, cols, pitch_x, pitch_y)


def flip_pass(p: PassSpec, part: PartSpec, scan_id: str) -> PassSpec:
    """Same scanner motion after turning the part 180 degrees about its long axis."""
    a = np.array([0.0, part.width / 2.0, -part.thickness / 2.0])
    F = RigidTransform(rot_x(np.pi), a - rot_x(np.pi) @ a)
    q = compose(F, p.pose)
    return PassSpec(scan_id, q.rotation.reshape(-1).tolist(), q.translation.tolist(),
                    p.rows, p.cols, p.pitch_x, p.pitch_y)


def _place_targets(rng, part, radius, contrast, step=30.0, skip=0.15):
    """Semi-random layout: jittered staggered grid with random gaps.

    Face targets avoid the bead and the face borders. Side targets run the
    full length (the side faces are flat) at two alternating heights. They
    and the end-face targets are never skipped: they are what ties the top
    passes to the bottom ones and the end passes to the long ones.
    """
    L, W, T = part.length, part.width, part.thickness
    margin = radius + 8.0
    s = part.bead_width / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    bead_clear = 7.0 * s + radius
    out = []
    rows_y = np.linspace(margin + 3.0, W - margin - 3.0, max(2, int(round((W - 2 * margin) / 20.0)) + 1))
    for face, z in (("top", 0.0), ("bottom", -T)):
        for j, y in enumerate(rows_y):
            xs = np.arange(margin + (step / 2 if j % 2 else 0.0), L - margin + 1e-9, step)
            for x in xs:
                x = x + rng.uniform(-5.0, 5.0)
                yy = y + rng.uniform(-3.0, 3.0)
                if abs(x - part.bead_x) <= bead_clear or rng.uniform() < skip:
                    continue
                x = float(np.clip(x, margin, L - margin))
                out.append(TargetSpec([x, float(yy), z], face, radius, contrast))
    zs = (-T / 2.0 - 1.5, -T / 2.0 + 1.5)
    for face, y in (("y0", 0.0), ("yW", W)):
        for k, x in enumerate(np.arange(margin, L - margin + 1e-9, step * 2.0 / 3.0)):
            x = float(np.clip(x + rng.uniform(-3.0, 3.0), margin, L - margin))
            out.append(TargetSpec([x, y, zs[k % 2] + rng.uniform(-0.5, 0.5)], face, radius, contrast))
    n_end = max(3, int(np.floor((W - 2 * margin) / 15.0)) + 1)
    for face, x in (("x0", 0.0), ("xL", L)):
        for y in np.linspace(margin, W - margin, n_end):
            y = float(y + rng.uniform(-2.0, 2.0))
            out.append(TargetSpec([x, y, -T / 2.0 + rng.uniform(-0.5, 0.5)], face, radius, contrast))
    return out


def _long_look_at(part, side):
    # centre of the top face + one side face as projected on the scan line
    c45 = np.sqrt(0.5)
    W, T = part.width, part.thickness
    if side == "yW":
        corner, xl = np.array([part.length / 2, W, 0.0]), np.array([0.0, -c45, c45])
    else:
        corner, xl = np.array([part.length / 2, 0.0, 0.0]), np.array([0.0, c45, c45])
    return corner + (W - T) * c45 / 2.0 * xl


def _end_look_at(part, end, fov, margin):
    # the scan line starts `margin` mm beyond the end face
    c45 = np.sqrt(0.5)
    off = fov / 2.0 - part.thickness * c45 - margin
    if end == "x0":
        corner, xl = np.array([0.0, part.width / 2, 0.0]), np.array([c45, 0.0, c45])
    else:
        corner, xl = np.array([part.length, part.width / 2, 0.0]), np.array([-c45, 0.0, c45])
    return corner + off * xl


def scene_passes(part, pitch_x=0.5, pitch_y=0.5, fov_end=110.0, end_margin=12.0):
    """Four passes over the top half, then the same four after the flip.

    Two long passes travel along the part at 45 degrees, each covering the
    top face and one side face. Two short passes travel across the width
    over each end. The flipped copies are named by the faces they see.
    """
    c45 = np.sqrt(0.5)
    L, W, T = part.length, part.width, part.thickness
    fov_long = float(np.ceil((W + T) * c45 + 5.0))
    long_len, end_len = L + 60.0, W + 60.0
    top = [
        make_pass("top_yW", (0, -c45, -c45), (1, 0, 0), _long_look_at(part, "yW"),
                  fov_long, long_len, pitch_x, pitch_y),
        make_pass("top_y0", (0, c45, -c45), (1, 0, 0), _long_look_at(part, "y0"),
                  fov_long, long_len, pitch_x, pitch_y),
        make_pass("top_x0", (c45, 0, -c45), (0, 1, 0), _end_look_at(part, "x0", fov_end, end_margin),
                  fov_end, end_len, pitch_x, pitch_y),
        make_pass("top_xL", (-c45, 0, -c45), (0, 1, 0), _end_look_at(part, "xL", fov_end, end_margin),
                  fov_end, end_len, pitch_x, pitch_y),
    ]
    flipped = {"top_yW": "bot_y0", "top_y0": "bot_yW", "top_x0": "bot_x0", "top_xL": "bot_xL"}
    return top + [flip_pass(p, part, flipped[p.scan_id]) for p in top]


SCENE_OVERLAPS = [
    ["top_yW", "top_y0"], ["top_yW", "top_x0"], ["top_yW", "top_xL"],
    ["top_y0", "top_x0"], ["top_y0", "top_xL"],
    ["bot_yW", "bot_y0"], ["bot_yW", "bot_x0"], ["bot_yW", "bot_xL"],
    ["bot_y0", "bot_x0"], ["bot_y0", "bot_xL"],
    ["top_yW", "bot_yW"], ["top_y0", "bot_y0"], ["top_x0", "bot_x0"], ["top_xL", "bot_xL"],
]


def default_scene(seed=0, pitch_x=0.5, pitch_y=0.5, depth_noise=0.02, outlier_frac=0.01,
                  pose_error_deg=0.5, pose_error_mm=1.0, part=None, fov_end=110.0,
                  target_radius=4.0, contrast=0.6, target_step=30.0) -> SceneSpec:
    """Desk-scale welded dog-bone job with 8 passes and a clamp near one end."""
    part = part or PartSpec()
    L, W, T = part.length, part.width, part.thickness
    rng = np.random.default_rng([seed, 7919])

    targets = _place_targets(rng, part, target_radius, contrast, step=target_step)
    fixtures = [FixtureBlob([L + 5.0, 0.4 * W, -T - 8.0], [L + 15.0, 0.6 * W, -T + 4.0])]
    return SceneSpec(part, targets, fixtures, scene_passes(part, pitch_x, pitch_y, fov_end),
                     depth_noise, outlier_frac, pose_error_deg=pose_error_deg,
                     pose_error_mm=pose_error_mm, overlaps=[list(o) for o in SCENE_OVERLAPS],
                     seed=seed)


def mini_scene(seed=0, **kw) -> SceneSpec:
    """Scaled-down part with the same pass layout, for quick end-to-end runs."""
    part = PartSpec(length=160.0, width=60.0, thickness=20.0, bead_x=80.0)
    kw.setdefault("fov_end", 100.0)
    kw.setdefault("target_radius", 4.0)
    # the end passes see a short stretch of the part, so targets sit closer
    kw.setdefault("target_step", 24.0)
    return default_scene(seed=seed, part=part, **kw)


def flat_scene(rows, cols, pitch, discs, background=0.2, blur=None, z=0.0) -> SceneSpec:
    """Flat plate viewed straight down with identity pose; ``discs`` in pixels.

    Each disc is ``(row, col, radius_px, contrast)``.
    """
    big = max(rows, cols) * pitch * 4.0 + 100.0
    part = PartSpec(length=big, width=big, thickness=10.0, bead_height=0.0, bead_x=0.0)
    targets = [TargetSpec([c * pitch, r * pitch, 0.0], "top", rad * pitch, con)
               for r, c, rad, con in discs]
    p = PassSpec("flat", np.eye(3).reshape(-1).tolist(), [0.0, 0.0, -z], rows, cols, pitch, pitch)
    return SceneSpec(part, targets, [], [p], depth_noise=0.0, background=background,
                     spot_blur=pitch * 1.5 if blur is None else blur,
                     pose_error_deg=0.0, pose_error_mm=0.0)


def fraction_in_view(row, col, radius, rows, cols, n=200):
    """Share of a disc's area (pixel units) inside the sampled raster extent."""
    g = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    X, Y = np.meshgrid(g, g)
    m = X ** 2 + Y ** 2 <= 1.0
    rr, cc = row + radius * Y[m], col + radius * X[m]
    return float(np.mean((rr >= 0) & (rr <= rows - 1) & (cc >= 0) & (cc <= cols - 1)))


def disc_trial(seed, rows=160, cols=160, pitch=0.5, max_discs=4, radius_mm=(2.0, 8.0),
               contrast=(0.3, 0.7), min_in_view=0.6, gap_px=6.0, blank=False):
    """Random non-overlapping discs on a flat plate, some cut by the border.

    Returns ``(scene, discs)`` with discs as ``(row, col, radius_px, contrast)``.
    ``blank`` gives the same plate without discs.
    """
    rng = np.random.default_rng([seed, 7])
    background = float(rng.uniform(0.05, 0.3))
    discs = []
    for _ in range(50 * max_discs):
        if blank or len(discs) == max_discs:
            break
        rad = rng.uniform(*radius_mm) / pitch
        r, c = rng.uniform(-rad, rows - 1 + rad), rng.uniform(-rad, cols - 1 + rad)
        if fraction_in_view(r, c, rad, rows, cols) < min_in_view:
            continue
        if any(np.hypot(r - a, c - b) < rad + q + gap_px for a, b, q, _ in discs):
            continue
        discs.append((float(r), float(c), float(rad), float(rng.uniform(*contrast))))
    return flat_scene(rows, cols, pitch, discs, background=background), discs


def _ray_part(o, d, part):
    n = o.shape[0]
    best = np.full(n, np.inf)
    face = np.full(n, -1, dtype=np.int64)
    L, W, T = part.length, part.width, part.thickness
    eps = 1e-9

    def take(t, ok, fid):
        ok = ok & (t > 0) & (t < best)
        best[ok] = t[ok]
        face[ok] = fid

    with np.errstate(divide="ignore", invalid="ignore"):
        for X, fid in ((0.0, 0), (L, 1)):
            t = (X - o[:, 0]) / d[:, 0]
            p = o + t[:, None] * d
            b = part.bead(X)
            take(t, np.isfinite(t) & (p[:, 1] >= -eps) & (p[:, 1] <= W + eps)
                 & (p[:, 2] <= b + eps) & (p[:, 2] >= -T - b - eps), fid)
        for Y, fid in ((0.0, 2), (W, 3)):
            t = (Y - o[:, 1]) / d[:, 1]
            p = o + t[:, None] * d
            b = part.bead(p[:, 0])
            take(t, np.isfinite(t) & (p[:, 0] >= -eps) & (p[:, 0] <= L + eps)
                 & (p[:, 2] <= b + eps) & (p[:, 2] >= -T - b - eps), fid)
        for sign, off, fid in ((1.0, 0.0, 4), (-1.0, -T, 5)):
            # surface z = off + sign * b(x); Newton from the flat-plane hit
            t = (off - o[:, 2]) / d[:, 2]
            good = np.isfinite(t)
            t = np.where(good, t, 0.0)
            for _ in range(30):
                x = o[:, 0] + t * d[:, 0]
                g = o[:, 2] + t * d[:, 2] - off - sign * part.bead(x)
                gp = d[:, 2] - sign * part.bead_slope(x) * d[:, 0]
                t = t - np.where(good & (gp != 0), g / np.where(gp == 0, 1.0, gp), 0.0)
            p = o + t[:, None] * d
            g = p[:, 2] - off - sign * part.bead(p[:, 0])
            take(t, good & (np.abs(g) < 1e-9) & (p[:, 0] >= -eps) & (p[:, 0] <= L + eps)
                 & (p[:, 1] >= -eps) & (p[:, 1] <= W + eps), fid)
    return best, face


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (np.asarray(lo) - o) * inv
        t2 = (np.asarray(hi) - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def cast_rays(scene: SceneSpec, o, d):
    """Nearest hit along each ray: (t, surface id, world point). id -1 = miss."""
    t, face = _ray_part(o, d, scene.part)
    for k, blob in enumerate(scene.fixtures):
        tb = _ray_box(o, d, blob.lo, blob.hi)
        closer = tb < t
        t = np.where(closer, tb, t)
        face = np.where(closer, FIXTURE_BASE + k, face)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, face, p


def shade(scene: SceneSpec, face, p):
    inten = np.full(face.shape[0], scene.background)
    for k, blob in enumerate(scene.fixtures):
        inten[face == FIXTURE_BASE + k] = blob.intensity
    for tgt in scene.targets:
        fid = FACES.index(tgt.face)
        on = face == fid
        if not on.any():
            continue
        rho = np.linalg.norm(p[on] - np.asarray(tgt.center), axis=1)
        inten[on] += tgt.contrast * ndtr((tgt.radius - rho) / scene.spot_blur)
    return np.clip(inten, 0.0, 1.0)


@dataclass
class RenderedPass:
    cloud: PointCloud
    image: RangeImage
    true_pose: RigidTransform
    coarse_pose: RigidTransform
    outlier: np.ndarray
    cluster: np.ndarray
    visible_targets: Dict[int, list]

    def truth(self):
        return {
            "true_pose": self.true_pose.to_dict(),
            "coarse_pose": self.coarse_pose.to_dict(),
            "outlier_indices": np.flatnonzero(self.outlier).tolist(),
            "cluster_counts": {str(k): int(v) for k, v in zip(*np.unique(self.cluster, return_counts=True))},
            "visible_targets": {str(k): v for k, v in self.visible_targets.items()},
        }


def pose_error(scene: SceneSpec, index: int, centre) -> RigidTransform:
    """World-frame perturbation about the pass's look point, bounded by the scene limits."""
    rng = np.random.default_rng([scene.seed, index, 1])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(scene.pose_error_deg) * rng.uniform(0.0, 1.0)
    tdir = rng.normal(size=3)
    tdir /= np.linalg.norm(tdir)
    tmag = scene.pose_error_mm * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    R = exp_so3(axis * ang)
    c = np.asarray(centre, float)
    return RigidTransform(R, c - R @ c + tdir * tmag)


def render_pass(scene: SceneSpec, index: int) -> RenderedPass:
    if not 0 <= index < len(scene.passes):
        raise IndexError(f"pass {index} out of range")
    ps = scene.passes[index]
    pose = ps.pose
    rng = np.random.default_rng([scene.seed, index])

    rr, cc = np.meshgrid(np.arange(ps.rows), np.arange(ps.cols), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    local = np.column_stack([cc * ps.pitch_x, rr * ps.pitch_y, np.full(rr.size, STANDOFF)])
    o = pose.transform_points(local)
    d = np.broadcast_to(-pose.rotation[:, 2], o.shape)
    t, face, p = cast_rays(scene, o, d)

    hit = np.isfinite(t)
    if not np.any(hit & (face >= 0) & (face < FIXTURE_BASE)):
        raise DataError(f"pass {ps.scan_id} does not see the part")
    if scene.dropout_frac > 0:
        hit &= rng.uniform(size=hit.size) >= scene.dropout_frac
    idx = np.flatnonzero(hit)
    z = STANDOFF - t[idx]
    inten = shade(scene, face[idx], p[idx])
    if scene.depth_noise > 0:
        z = z + rng.normal(0.0, scene.depth_noise, size=z.size)
    outlier = np.zeros(idx.size, dtype=bool)
    if scene.outlier_frac > 0:
        outlier = rng.uniform(size=idx.size) < scene.outlier_frac
        k = int(outlier.sum())
        lo, hi = scene.outlier_offset
        z[outlier] += rng.choice([-1.0, 1.0], size=k) * rng.uniform(lo, hi, size=k)
    xyz = np.column_stack([cc[idx] * ps.pitch_x, rr[idx] * ps.pitch_y, z])
    cloud = PointCloud(xyz, inten, ps.scan_id, "scanner-local")
    img = build_range_image(rr[idx], cc[idx], cloud.xyz, cloud.intensity,
                            ps.pitch_x, ps.pitch_y, ps.rows, ps.cols, ps.scan_id)

    cluster = np.where(face[idx] >= FIXTURE_BASE, face[idx] - FIXTURE_BASE + 1, 0)
    cluster[outlier] = -1

    look = pose.transform_points([[(ps.cols - 1) * ps.pitch_x / 2, (ps.rows - 1) * ps.pitch_y / 2, 0.0]])[0]
    coarse = compose(pose_error(scene, index, look), pose)
    return RenderedPass(cloud, img, pose, coarse, outlier, cluster,
                        _visible_targets(scene, ps, pose))


def _visible_targets(scene, ps, pose):
    """Targets fully inside this raster whose centre ray reaches the target face."""
    out = {}
    if not scene.targets:
        return out
    C = np.array([t.center for t in scene.targets])
    loc = pose.inverse().transform_points(C)
    col, row = loc[:, 0] / ps.pitch_x, loc[:, 1] / ps.pitch_y
    o = pose.transform_points(np.column_stack([loc[:, 0], loc[:, 1], np.full(len(C), STANDOFF)]))
    d = np.broadcast_to(-pose.rotation[:, 2], o.shape)
    _, face, p = cast_rays(scene, o, d)
    for k, tgt in enumerate(scene.targets):
        ok = face[k] == FACES.index(tgt.face) and np.linalg.norm(p[k] - C[k]) < 1e-6
        n = np.asarray(FACE_NORMALS[tgt.face])
        facing = -pose.rotation[:, 2] @ n < -1e-6
        margin = tgt.radius / min(ps.pitch_x, ps.pitch_y) + 2
        inside = margin <= row[k] <= ps.rows - 1 - margin and margin <= col[k] <= ps.cols - 1 - margin
        if ok and facing and inside:
            out[k] = [float(row[k]), float(col[k])]
    return out


def write_scene(scene: SceneSpec, out_dir, job_name="job.json"):
    """Render every pass and write scans, poses, ground truth and a job file."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    coarse, truth, scans = {}, {}, []
    for i, ps in enumerate(scene.passes):
        rp = render_pass(scene, i)
        rel = f"scans/{ps.scan_id}.txt"
        write_scan(out / rel, rp.cloud, rp.image)
        coarse[ps.scan_id] = rp.coarse_pose
        truth[ps.scan_id] = rp.truth()
        scans.append({"scan_id": ps.scan_id, "path": rel})
    write_poses(out / "poses.json", coarse)
    gt = {
        "scene": scene.to_dict(),
        "passes": truth,
        "targets_world": [t.center for t in scene.targets],
    }
    (out / "ground_truth.json").write_text(json.dumps(gt, indent=1) + "\n")
    (out / job_name).write_text(json.dumps({"scans": scans, "poses": "poses.json"}, indent=1) + "\n")
    # a 0.1 mm merge keeps nearly every sample at 0.5 mm pitch; this keeps the surface stage quick
    (out / "config.json").write_text(json.dumps(recommended_config(scene), indent=1, sort_keys=True) + "\n")
    return out / job_name


def recommended_config(scene: SceneSpec) -> dict:
    pitch = max(max(p.pitch_x, p.pitch_y) for p in scene.passes)
    voxel = max(0.1, pitch)
    return {"voxel": voxel, "cluster_radius": 3.0 * voxel, "seed": int(scene.seed)}
