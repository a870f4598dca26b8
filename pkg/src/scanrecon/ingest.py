"""Scan/pose file I/O, range images and coarse alignment.

Scan file layout::

    # pitch_x pitch_y rows cols
    row col x y z intensity
    ...

Rows must appear in non-decreasing order (raster order). Pixels with no
return are simply absent. A headerless four-column ``x y z intensity``
variant is also accepted; its grid is inferred from the x/y spacing.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from scanrecon.core import PointCloud, RigidTransform, ScanPose, apply
from scanrecon.errors import DataError

_FLOAT_FMT = "%.10g"


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Raster view of one scan with a pixel -> point lookup.

    ``point_index[r, c]`` is the index into the owning cloud, or -1 where no
    return was recorded. ``xyz`` holds the owning cloud's coordinates at each
    valid pixel (NaN elsewhere) so centres can be lifted back to 3D.
    """

    rows: int
    cols: int
    pitch_x: float
    pitch_y: float
    depth: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray
    point_index: np.ndarray
    xyz: np.ndarray
    scan_id: Optional[str] = None

    @property
    def pixel_rc(self) -> Tuple[np.ndarray, np.ndarray]:
        """(row, col) of every cloud point, in cloud order."""
        r, c = np.nonzero(self.valid)
        order = np.argsort(self.point_index[r, c], kind="stable")
        return r[order], c[order]

    def with_cloud(self, cloud: PointCloud) -> "RangeImage":
        """Same raster, coordinates re-read from ``cloud`` (e.g. after a transform)."""
        r, c = self.pixel_rc
        return build_range_image(
            r, c, cloud.xyz, cloud.intensity, self.pitch_x, self.pitch_y,
            self.rows, self.cols, self.scan_id,
        )

    def subset(self, cloud: PointCloud, keep) -> Tuple[PointCloud, "RangeImage"]:
        """Keep the given cloud indices; the image is rebuilt to match."""
        keep = np.asarray(keep, dtype=np.int64)
        r, c = self.pixel_rc
        sub = cloud.subset(keep)
        img = build_range_image(
            r[keep], c[keep], sub.xyz, sub.intensity, self.pitch_x, self.pitch_y,
            self.rows, self.cols, self.scan_id,
        )
        return sub, img


def build_range_image(pix_r, pix_c, xyz, intensity, pitch_x, pitch_y, rows, cols,
                      scan_id=None) -> RangeImage:
    pix_r = np.asarray(pix_r, dtype=np.int64)
    pix_c = np.asarray(pix_c, dtype=np.int64)
    if not (pitch_x > 0 and pitch_y > 0):
        raise DataError("pixel pitch must be positive")
    n = pix_r.shape[0]
    if n and (pix_r.min() < 0 or pix_c.min() < 0 or pix_r.max() >= rows or pix_c.max() >= cols):
        raise DataError("pixel index outside the declared raster")
    point_index = np.full((rows, cols), -1, dtype=np.int64)
    point_index[pix_r, pix_c] = np.arange(n)
    if np.count_nonzero(point_index >= 0) != n:
        raise DataError("duplicate pixel in scan")
    valid = point_index >= 0
    grid_xyz = np.full((rows, cols, 3), np.nan)
    grid_xyz[pix_r, pix_c] = xyz
    depth = np.full((rows, cols), np.nan)
    depth[pix_r, pix_c] = xyz[:, 2]
    inten = np.zeros((rows, cols))
    if intensity is not None:
        inten[pix_r, pix_c] = intensity
    for a in (point_index, valid, grid_xyz, depth, inten):
        a.setflags(write=False)
    return RangeImage(rows, cols, float(pitch_x), float(pitch_y), depth, inten,
                      valid, point_index, grid_xyz, scan_id)


def _parse_header(line):
    parts = line.lstrip("#").split()
    if len(parts) != 4:
        return None
    try:
        px, py = float(parts[0]), float(parts[1])
        rows, cols = int(parts[2]), int(parts[3])
    except ValueError:
        return None
    return px, py, rows, cols


def _locate_bad_line(lines, linenos, ncol):
    for text, lineno in zip(lines, linenos):
        parts = text.split()
        if len(parts) != ncol:
            return lineno, f"expected {ncol} fields, got {len(parts)}"
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            return lineno, "non-numeric field"
        if not all(np.isfinite(vals)):
            return lineno, "non-finite value"
    return None, "unparseable content"


def read_scan(path, scan_id: Optional[str] = None) -> Tuple[PointCloud, RangeImage]:
    """Parse a scan file into a scanner-local cloud plus its range image."""
    path = Path(path)
    if scan_id is None:
        scan_id = path.stem
    text = path.read_text()
    header = None
    data, linenos = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            if header is None and not data:
                header = _parse_header(s)
            continue
        data.append(s)
        linenos.append(lineno)
    if not data:
        raise DataError(f"{path}: scan file has no points")

    ncol = len(data[0].split())
    if ncol not in (4, 6):
        raise DataError(f"{path}:{linenos[0]}: expected 4 or 6 fields per line")
    try:
        arr = np.loadtxt(io.StringIO("\n".join(data)), dtype=np.float64, ndmin=2)
        if arr.shape[1] != ncol:
            raise ValueError
    except ValueError:
        lineno, why = _locate_bad_line(data, linenos, ncol)
        raise DataError(f"{path}:{lineno}: malformed line ({why})") from None
    bad = ~np.all(np.isfinite(arr), axis=1)
    if bad.any():
        raise DataError(f"{path}:{linenos[int(np.argmax(bad))]}: malformed line (non-finite value)")

    if ncol == 6:
        rc = arr[:, :2]
        bad_rc = np.any((rc != np.round(rc)) | (rc < 0), axis=1)
        if bad_rc.any():
            lineno = linenos[int(np.argmax(bad_rc))]
            raise DataError(f"{path}:{lineno}: row/col must be non-negative integers")
        pix_r = rc[:, 0].astype(np.int64)
        pix_c = rc[:, 1].astype(np.int64)
        dec = np.nonzero(np.diff(pix_r) < 0)[0]
        if dec.size:
            raise DataError(f"{path}:{linenos[dec[0] + 1]}: non-monotonic row index")
        xyz, inten = arr[:, 2:5], arr[:, 5]
        if header is None:
            px = py = 1.0
            rows, cols = int(pix_r.max()) + 1, int(pix_c.max()) + 1
        else:
            px, py, rows, cols = header
    else:
        xyz, inten = arr[:, :3], arr[:, 3]
        px, py = (header[0], header[1]) if header else (_infer_pitch(xyz[:, 0]), _infer_pitch(xyz[:, 1]))
        pix_c = np.round((xyz[:, 0] - xyz[:, 0].min()) / px).astype(np.int64)
        pix_r = np.round((xyz[:, 1] - xyz[:, 1].min()) / py).astype(np.int64)
        rows, cols = int(pix_r.max()) + 1, int(pix_c.max()) + 1
        if header:
            rows, cols = max(rows, header[2]), max(cols, header[3])
        order = np.lexsort((pix_c, pix_r))
        pix_r, pix_c, xyz, inten = pix_r[order], pix_c[order], xyz[order], inten[order]

    if inten.min() < 0 or inten.max() > 1:
        raise DataError(f"{path}: intensity outside [0, 1]")
    cloud = PointCloud(xyz, inten, scan_id, "scanner-local")
    img = build_range_image(pix_r, pix_c, cloud.xyz, cloud.intensity, px, py, rows, cols, scan_id)
    return cloud, img


def _infer_pitch(v):
    u = np.unique(v)
    if u.size < 2:
        return 1.0
    gaps = np.diff(u)
    gaps = gaps[gaps > 1e-9 * max(1.0, np.abs(u).max())]
    return float(gaps.min()) if gaps.size else 1.0


def format_scan(cloud: PointCloud, img: RangeImage) -> str:
    r, c = img.pixel_rc
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    f = _FLOAT_FMT
    fmt = f"%d %d {f} {f} {f} {f}"
    lines = [f"# {img.pitch_x!r} {img.pitch_y!r} {img.rows} {img.cols}"]
    lines += [
        fmt % (ri, ci, x, y, z, i)
        for ri, ci, (x, y, z), i in zip(r.tolist(), c.tolist(), cloud.xyz.tolist(), inten.tolist())
    ]
    return "\n".join(lines) + "\n"


def write_scan(path, cloud: PointCloud, img: RangeImage) -> None:
    if len(cloud) == 0:
        raise DataError("refusing to write an empty scan")
    Path(path).write_text(format_scan(cloud, img))


def write_cloud(path, cloud: PointCloud, pitch: float = 1.0) -> None:
    """Store an unstructured cloud in the scan format as a single raster row."""
    n = len(cloud)
    img = build_range_image(np.zeros(n, np.int64), np.arange(n), cloud.xyz, cloud.intensity,
                            pitch, pitch, 1, max(n, 1), cloud.scan_id)
    write_scan(path, cloud, img)


def read_cloud(path, frame="reference") -> PointCloud:
    cloud, _ = read_scan(path)
    return PointCloud(cloud.xyz, cloud.intensity, None, frame)


def read_poses(path) -> Dict[str, RigidTransform]:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    if isinstance(entries, dict) and "poses" in entries:
        entries = entries["poses"]
    poses = {}
    for e in entries:
        sid = str(e["scan_id"])
        if sid in poses:
            raise DataError(f"{path}: duplicate pose for scan {sid}")
        try:
            poses[sid] = RigidTransform.from_dict(e)
        except (ValueError, KeyError) as err:
            raise DataError(f"{path}: bad pose for scan {sid}: {err}") from None
    return poses


def poses_to_json(poses: Dict[str, RigidTransform]) -> list:
    return [{"scan_id": sid, **t.to_dict()} for sid, t in poses.items()]


def write_poses(path, poses: Dict[str, RigidTransform]) -> None:
    Path(path).write_text(json.dumps(poses_to_json(poses), indent=1) + "\n")


def coarse_align(c: PointCloud, poses) -> PointCloud:
    """Map a scanner-local cloud into the coarse frame using its recorded pose."""
    if isinstance(poses, ScanPose):
        poses = {poses.scan_id: poses.pose}
    elif not isinstance(poses, dict):
        poses = {p.scan_id: p.pose for p in poses}
    if c.scan_id not in poses:
        raise DataError(f"no pose for scan {c.scan_id!r}")
    return apply(poses[c.scan_id], c, frame="coarse-aligned")


@dataclass
class ScanJob:
    scans: List[Tuple[str, Path]]
    poses: Dict[str, RigidTransform]
    config: Optional[object] = None

    def __post_init__(self):
        ids = [s for s, _ in self.scans]
        if len(set(ids)) != len(ids):
            raise DataError("scan ids must be unique")
        missing = [s for s in ids if s not in self.poses]
        if missing:
            raise DataError(f"missing pose for scan(s): {', '.join(missing)}")

    @property
    def scan_ids(self):
        return [s for s, _ in self.scans]


def load_job(path, config=None) -> ScanJob:
    """Job file: ``{"scans": [{"scan_id", "path"}], "poses": "poses.json"}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read job file {path}: {e}") from None
    base = path.parent
    scans = [(str(s["scan_id"]), base / s["path"]) for s in doc["scans"]]
    poses = read_poses(base / doc["poses"])
    return ScanJob(scans, poses, config)
