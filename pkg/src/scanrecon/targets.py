"""Circular target detection in the backscatter image and lifting to 3D.

Detection is a gradient-based circular Hough transform in two passes:
centre votes are cast along each edge pixel's gradient line, then a radius
histogram is built for each accumulator peak. Peaks are scored by how much
of the circle's circumference is backed by radially consistent edges.
Complete discs are then re-centred with an intensity moment, which is far
more precise than the accumulator centroid for small targets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage, optimize
from scipy.special import ndtr
from scipy.spatial import cKDTree

from scanrecon.errors import DataError
from scanrecon.ingest import RangeImage

log = logging.getLogger(__name__)

# measured radii may exceed the configured band by this many pixels
RADIUS_SLACK = 0.5
N_SECTORS = 36


@dataclass(frozen=True, eq=False)
class Target:
    scan_id: Optional[str]
    center3d: np.ndarray
    center_px: tuple
    radius_px: float
    radius_mm: float
    confidence: float
    # True when the centre came from the intensity moment over a full window
    refined: bool = False

    def to_dict(self):
        return {
            "scan_id": self.scan_id,
            "center3d": [float(v) for v in self.center3d],
            "center_px": [float(v) for v in self.center_px],
            "radius_px": float(self.radius_px),
            "radius_mm": float(self.radius_mm),
            "confidence": float(self.confidence),
            "refined": bool(self.refined),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d.get("scan_id"),
            np.asarray(d["center3d"], dtype=np.float64),
            tuple(float(v) for v in d["center_px"]),
            float(d["radius_px"]),
            float(d["radius_mm"]),
            float(d["confidence"]),
            bool(d.get("refined", False)),
        )


def write_targets(path, targets_by_scan):
    doc = {sid: [t.to_dict() for t in ts] for sid, ts in targets_by_scan.items()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_targets(path):
    doc = json.loads(Path(path).read_text())
    return {sid: [Target.from_dict(d) for d in ts] for sid, ts in doc.items()}


def _fill_invalid(values, valid):
    """Invalid pixels take the mean of valid 8-neighbours, else the nearest valid value."""
    if valid.all():
        return values.copy()
    v = np.where(valid, values, 0.0)
    k = np.ones((3, 3))
    num = ndimage.convolve(v, k, mode="constant")
    den = ndimage.convolve(valid.astype(float), k, mode="constant")
    out = np.where(valid, values, np.divide(num, den, out=np.zeros_like(num), where=den > 0))
    rest = ~valid & (den == 0)
    if rest.any():
        known = ~rest
        _, (ir, ic) = ndimage.distance_transform_edt(rest, return_indices=True)
        out = np.where(known, out, out[ir, ic])
    return out


def _square_pixels(img: RangeImage, inten, valid):
    """Resample columns so both pixel axes have pitch ``pitch_y``."""
    px, py = img.pitch_x, img.pitch_y
    if abs(px - py) <= 1e-9 * max(px, py):
        return inten, valid, 1.0
    scale = py / px  # original columns per square pixel
    ncols = int(np.floor((img.cols - 1) / scale)) + 1
    src = inten
    if scale > 1:
        src = ndimage.uniform_filter1d(inten, size=max(int(round(scale)), 1), axis=1, mode="nearest")
    rr, cc = np.meshgrid(np.arange(img.rows, dtype=float), np.arange(ncols) * scale, indexing="ij")
    out = ndimage.map_coordinates(src, [rr, cc], order=1, mode="nearest")
    v = ndimage.map_coordinates(valid.astype(float), [rr, np.round(cc)], order=0, mode="nearest") > 0.5
    return out, v, scale


def _accumulate(shape, ys, xs, weights=None):
    """Bilinear splat of vote positions into an accumulator."""
    h, w = shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    acc = np.zeros(h * w)
    base = np.ones_like(ys) if weights is None else weights
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        acc += np.bincount(yy[ok] * w + xx[ok], weights=(base * wgt)[ok], minlength=h * w)
    return acc.reshape(h, w)


def _moment_centre(I, valid, cy, cx, radius, iters=8, max_invalid=0.1, max_shift=2.0,
                   others=None):
    """Intensity centroid under a smooth window, iterated to its fixed point.

    The window is radially symmetric about the current estimate, so for a
    target whose image is point-symmetric the fixed point is the exact centre
    regardless of where the taper cuts the profile or how far off the
    background estimate is. Pixels nearer the edge of one of ``others``
    (``row, col, radius`` of neighbouring targets) than to this target's edge
    are left out.
    """
    others = np.zeros((0, 3)) if others is None else np.asarray(others, float).reshape(-1, 3)
    h, w = I.shape
    r_a, r_b = radius + 2.0, radius + 5.0
    r_ring = r_b + 3.0
    y, x = cy, cx
    for _ in range(iters):
        y0, y1 = int(np.floor(y - r_ring)), int(np.ceil(y + r_ring))
        x0, x1 = int(np.floor(x - r_ring)), int(np.ceil(x + r_ring))
        if y0 < 0 or x0 < 0 or y1 >= h or x1 >= w:
            return None
        win = I[y0:y1 + 1, x0:x1 + 1]
        vwin = valid[y0:y1 + 1, x0:x1 + 1]
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        rho = np.hypot(gy - y, gx - x)
        mine = np.ones(rho.shape, bool)
        for oy, ox, orad in others:
            mine &= np.hypot(gy - oy, gx - ox) - orad > rho - radius
        # filled gaps outside the disc read as background and carry ~no weight
        core = rho < r_a
        if np.count_nonzero(~vwin[core]) > max_invalid * np.count_nonzero(core):
            return None
        ring = (rho >= r_b) & (rho <= r_ring) & vwin & mine
        if not ring.any():
            return None
        bg = np.median(win[ring])
        taper = np.clip((r_b - rho) / (r_b - r_a), 0.0, 1.0)
        win_w = np.sin(0.5 * np.pi * taper) ** 2 * mine
        wgt = (win - bg) * win_w
        tot = wgt.sum()
        if tot < 0:
            wgt, tot = -wgt, -tot
        if tot <= 1e-12:
            return None
        ny = float((wgt * gy).sum() / tot)
        nx = float((wgt * gx).sum() / tot)
        step = np.hypot(ny - y, nx - x)
        y, x = ny, nx
        if step < 1e-10:
            break
    if np.hypot(y - cy, x - cx) > max_shift:
        return None
    return y, x


def _fit_disc(I, valid, cy, cx, radius, max_shift):
    """Least-squares fit of a blurred disc ``b + a * Phi((R - rho) / s)``.

    Uses only pixels inside the image, so it stays unbiased for a target
    cut by the image border, where the centroid has no symmetric window.
    """
    h, w = I.shape
    reach = radius + 6.0
    y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)), h - 1)
    x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)), w - 1)
    gr, gc = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    ok = valid[y0:y1 + 1, x0:x1 + 1] & (np.hypot(gr - cy, gc - cx) <= reach)
    if np.count_nonzero(ok) < 20:
        return None
    py, px, v = gr[ok].astype(float), gc[ok].astype(float), I[y0:y1 + 1, x0:x1 + 1][ok]
    rho0 = np.hypot(py - cy, px - cx)
    inner, outer = v[rho0 < 0.6 * radius], v[rho0 > radius + 3.0]
    if inner.size == 0 or outer.size == 0:
        return None
    b0 = float(np.median(outer))
    q0 = [cy, cx, radius, float(np.median(inner)) - b0, b0, 1.0]

    def resid(q):
        yc, xc, R, a, b, sd = q
        return b + a * ndtr((R - np.hypot(py - yc, px - xc)) / sd) - v

    lo = [cy - max_shift, cx - max_shift, 0.5 * radius, -np.inf, -np.inf, 0.2]
    hi = [cy + max_shift, cx + max_shift, 1.5 * radius + 2.0, np.inf, np.inf, 0.5 * radius + 1.0]
    fit = optimize.least_squares(resid, q0, bounds=(lo, hi), x_scale="jac")
    if not fit.success or abs(fit.x[3]) < 1e-3:
        return None
    return float(fit.x[0]), float(fit.x[1]), float(fit.x[2])


def _profile_radius(I, valid, cy, cx, radius):
    """Radius where the azimuthal mean profile crosses half way from disc to background."""
    h, w = I.shape
    reach = radius + 6.0
    y0, y1 = max(int(np.floor(cy - reach)), 0), min(int(np.ceil(cy + reach)), h - 1)
    x0, x1 = max(int(np.floor(cx - reach)), 0), min(int(np.ceil(cx + reach)), w - 1)
    gr, gc = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    rho = np.hypot(gr - cy, gc - cx)
    ok = valid[y0:y1 + 1, x0:x1 + 1] & (rho <= reach)
    vals = I[y0:y1 + 1, x0:x1 + 1][ok]
    k = np.floor(rho[ok] / 0.5).astype(int)
    cnt = np.bincount(k)
    prof = np.bincount(k, weights=vals) / np.maximum(cnt, 1)
    rr = (np.arange(prof.size) + 0.5) * 0.5
    has = cnt > 0
    inner = has & (rr <= max(radius - 3.0, 0.5 * radius))
    outer = has & (rr >= radius + 3.0)
    if not inner.any() or not outer.any():
        return None
    a, b = prof[inner].mean(), prof[outer].mean()
    if abs(a - b) < 1e-6:
        return None
    q = (prof - b) / (a - b)  # 1 inside, 0 outside
    span = has & (rr > 0.5 * radius) & (rr < radius + 3.0)
    idx = np.flatnonzero(span)
    for i, j in zip(idx[:-1], idx[1:]):
        if q[i] >= 0.5 > q[j]:
            return float(rr[i] + (q[i] - 0.5) / (q[i] - q[j]) * (rr[j] - rr[i]))
    return None


def _write_pgm(path, a):
    a = np.asarray(a, dtype=float)
    top = a.max() if a.size and a.max() > 0 else 1.0
    data = np.clip(a / top * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def detect_circles(img: RangeImage, r_min: float = 2.0, r_max: float = 8.0,
                   vote_threshold: float = 0.5, edge_percentile: float = 90.0,
                   refine: bool = True, max_candidates: int = 400,
                   accumulator_path=None) -> List[Target]:
    """Find circular targets; radii in mm, confidence = circumference coverage."""
    if not (0 < r_min < r_max):
        raise ValueError(f"degenerate radius range [{r_min}, {r_max}]")
    if not img.valid.any():
        raise DataError("range image has no valid pixels")

    inten = _fill_invalid(np.asarray(img.intensity, dtype=float), img.valid)
    lo, hi = inten[img.valid].min(), inten[img.valid].max()
    if hi - lo < 1e-12:
        return []
    inten = (inten - lo) / (hi - lo)
    I, valid, col_scale = _square_pixels(img, inten, img.valid)
    pitch = img.pitch_y
    rmin_px, rmax_px = r_min / pitch, r_max / pitch

    gx = ndimage.sobel(I, axis=1) / 8.0
    gy = ndimage.sobel(I, axis=0) / 8.0
    mag = np.hypot(gx, gy)
    thr = max(np.percentile(mag, edge_percentile), 0.02)
    ey, ex = np.nonzero(mag >= thr)
    if ey.size == 0:
        return []
    em = mag[ey, ex]
    uy, ux = gy[ey, ex] / em, gx[ey, ex] / em

    steps = np.arange(rmin_px, rmax_px + 0.25, 0.5)
    sy = np.concatenate([(uy[:, None] * steps[None, :]).ravel(), -(uy[:, None] * steps[None, :]).ravel()])
    sx = np.concatenate([(ux[:, None] * steps[None, :]).ravel(), -(ux[:, None] * steps[None, :]).ravel()])
    py_ = np.concatenate([np.repeat(ey, steps.size)] * 2) + sy
    px_ = np.concatenate([np.repeat(ex, steps.size)] * 2) + sx
    acc = ndimage.gaussian_filter(_accumulate(I.shape, py_, px_), 1.0)
    if accumulator_path is not None:
        _write_pgm(accumulator_path, acc)

    nms = max(3, int(2 * np.floor(rmin_px) + 1))
    peaks = (acc == ndimage.maximum_filter(acc, size=nms, mode="constant")) & (acc > 1e-9)
    pr, pc = np.nonzero(peaks)
    order = np.lexsort((pc, pr, -acc[pr, pc]))[:max_candidates]
    pr, pc = pr[order], pc[order]

    edge_pts = np.column_stack([ey, ex]).astype(float)
    tree = cKDTree(edge_pts)
    h, w = I.shape
    found = []
    for r0, c0 in zip(pr.tolist(), pc.tolist()):
        ys, xs = slice(max(r0 - 1, 0), min(r0 + 2, h)), slice(max(c0 - 1, 0), min(c0 + 2, w))
        patch = acc[ys, xs]
        gr, gc = np.mgrid[ys, xs]
        cy = float((patch * gr).sum() / patch.sum())
        cx = float((patch * gc).sum() / patch.sum())

        idx = np.asarray(tree.query_ball_point([cy, cx], rmax_px + 2.0), dtype=np.int64)
        if idx.size < 3:
            continue
        dy, dx = edge_pts[idx, 0] - cy, edge_pts[idx, 1] - cx
        dist = np.hypot(dy, dx)
        ok = dist > 1e-9
        cosang = np.zeros_like(dist)
        cosang[ok] = (dy[ok] * uy[idx][ok] + dx[ok] * ux[idx][ok]) / dist[ok]
        cons = ok & (np.abs(cosang) >= 0.8)
        if cons.sum() < 3:
            continue
        bins = np.arange(rmin_px - 1.0, rmax_px + 1.5, 0.5)
        hist, _ = np.histogram(dist[cons], bins=bins, weights=em[idx][cons])
        if hist.max() <= 0:
            continue
        kb = int(np.argmax(hist))
        centre_bin = 0.5 * (bins[kb] + bins[kb + 1])
        near = cons & (np.abs(dist - centre_bin) <= 1.0)
        radius = float(np.average(dist[near], weights=em[idx][near]))
        # the edge band reads up to a pixel wide; the final check uses the profile radius
        if not (rmin_px - 1.0 <= radius <= rmax_px + 1.0):
            continue
        tol = max(1.5, 0.2 * radius)
        ring = cons & (np.abs(dist - radius) <= tol)
        sector = ((np.arctan2(dy[ring], dx[ring]) + np.pi) / (2 * np.pi) * N_SECTORS).astype(int) % N_SECTORS
        conf = np.unique(sector).size / N_SECTORS
        if conf < vote_threshold:
            continue
        found.append((conf, float(acc[r0, c0]), cy, cx, radius))

    found.sort(key=lambda f: (-f[0], -f[1], f[2], f[3]))
    # targets never overlap, so a candidate inside a stronger circle is the
    # same target (oblique discs are ellipses and can split into two peaks)
    kept = []
    for conf, _, cy, cx, radius in found:
        refined = False
        if refine:
            m = _moment_centre(I, valid, cy, cx, radius, max_shift=0.5 * radius + 1.0)
            if m is None:
                # the window is cut by the image border
                m = _fit_disc(I, valid, cy, cx, radius, max_shift=0.5 * radius + 1.0)
            if m is not None:
                cy, cx = m[:2]
                refined = True
        if all(np.hypot(cy - k[1], cx - k[2]) >= max(rmin_px, k[3]) for k in kept):
            kept.append((conf, cy, cx, radius, refined))
    # a neighbour inside the window pulls the centroid towards it; do it
    # again with each pixel assigned to its nearest target
    if refine and len(kept) > 1:
        C = np.array([(k[1], k[2], k[3]) for k in kept])
        redo = []
        for i, (conf, cy, cx, radius, refined) in enumerate(kept):
            d = np.hypot(C[:, 0] - cy, C[:, 1] - cx)
            near = (d < 2.0 * (radius + 8.0)) & (np.arange(len(kept)) != i)
            if refined and near.any():
                m = _moment_centre(I, valid, cy, cx, radius, max_shift=0.5 * radius + 1.0,
                                   others=C[near])
                if m is not None:
                    cy, cx = m
            redo.append((conf, cy, cx, radius, refined))
        kept = redo

    targets = []
    for conf, cy, cx, radius, refined in kept:
        if refined:
            # no edge in the radial profile: votes from some larger structure
            radius = _profile_radius(I, valid, cy, cx, radius)
            if radius is None:
                continue
        if not (rmin_px - RADIUS_SLACK <= radius <= rmax_px + RADIUS_SLACK):
            continue
        t = Target(img.scan_id, np.full(3, np.nan), (cy, cx * col_scale), radius,
                   radius * pitch, conf, refined)
        lifted = lift_to_3d(t, img)
        if lifted is not None:
            targets.append(lifted)
    targets.sort(key=lambda t: (t.center_px[0], t.center_px[1]))
    return targets


def lift_to_3d(t: Target, img: RangeImage) -> Optional[Target]:
    """Back-project a subpixel centre through the 3x3 pixel neighbourhood.

    The valid neighbours' 3D positions are fitted with a first-order model
    in (row, col) by least squares and evaluated at the centre. With two
    collinear neighbours this reduces to linear interpolation, with one it
    returns that pixel's point.
    """
    r, c = t.center_px
    r0, c0 = int(round(r)), int(round(c))
    rs = np.arange(max(r0 - 1, 0), min(r0 + 2, img.rows))
    cs = np.arange(max(c0 - 1, 0), min(c0 + 2, img.cols))
    if rs.size == 0 or cs.size == 0:
        log.warning("target at (%.2f, %.2f) lies outside the image; discarded", r, c)
        return None
    gr, gc = np.meshgrid(rs, cs, indexing="ij")
    ok = img.valid[gr, gc]
    if not ok.any():
        log.warning("no valid pixel around target at (%.2f, %.2f); discarded", r, c)
        return None
    P = img.xyz[gr[ok], gc[ok]]
    uv = np.column_stack([gr[ok] - r, gc[ok] - c]).astype(float)

    centred = uv - uv.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False) if len(uv) > 1 else np.zeros(2)
    if len(uv) >= 3 and sv[-1] > 1e-9:
        A = np.column_stack([np.ones(len(uv)), uv])
        beta, *_ = np.linalg.lstsq(A, P, rcond=None)
        p = beta[0]
    elif len(uv) >= 2 and sv[0] > 1e-9:
        _, _, Vt = np.linalg.svd(centred)
        s = uv @ Vt[0]
        A = np.column_stack([np.ones(len(s)), s])
        beta, *_ = np.linalg.lstsq(A, P, rcond=None)
        p = beta[0]
    else:
        p = P.mean(axis=0)
    return replace(t, center3d=np.asarray(p, dtype=np.float64))
