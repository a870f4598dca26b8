"""Geometry primitives shared by every stage.

Lengths are millimetres everywhere. Clouds are stored as ``(N, 3)`` float64
arrays rather than lists of point objects; a "Point3" is one row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FRAMES = ("scanner-local", "coarse-aligned", "reference")

_ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    xyz: np.ndarray
    intensity: Optional[np.ndarray] = None
    scan_id: Optional[str] = None
    frame: str = "scanner-local"

    def __post_init__(self):
        xyz = _frozen(self.xyz).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            inten = _frozen(self.intensity).reshape(-1)
            if inten.shape[0] != xyz.shape[0]:
                raise ValueError("intensity length does not match point count")
            if inten.size and (inten.min() < 0.0 or inten.max() > 1.0):
                raise ValueError("intensity must lie in [0, 1]")
            object.__setattr__(self, "intensity", inten)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}; expected one of {FRAMES}")

    def __len__(self):
        return self.xyz.shape[0]

    def subset(self, index) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.xyz[index], inten, self.scan_id, self.frame)

    def with_frame(self, frame: str) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, self.scan_id, frame)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def exp_so3(w):
    """Rodrigues' formula; series expansion below 1e-8 rad."""
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    K = skew(w)
    if th2 < 1e-16:
        a, b = 1.0 - th2 / 6.0, 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a, b = np.sin(th) / th, (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R):
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(vee) / 2.0
    th = np.arctan2(s, c)
    if th < 1e-8:
        return vee / 2.0
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ vee < 0:
            axis = -axis
        return th * axis
    return th / (2.0 * np.sin(th)) * vee


def left_jacobian_so3(w):
    """J such that d(exp(w) p)/dw = -skew(exp(w) p) @ J."""
    w = np.asarray(w, dtype=np.float64)
    th2 = float(w @ w)
    K = skew(w)
    if th2 < 1e-12:
        a, b = 0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0
    else:
        th = np.sqrt(th2)
        a = (1.0 - np.cos(th)) / th2
        b = (th - np.sin(th)) / (th2 * th)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle_between(R1, R2):
    """Geodesic angle in rad; chord-based so it stays accurate near zero."""
    d = np.linalg.norm(np.asarray(R1) - np.asarray(R2))
    return float(2.0 * np.arcsin(min(d / (2.0 * np.sqrt(2.0)), 1.0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rotvec(cls, w, t=(0.0, 0.0, 0.0)):
        return cls(exp_so3(w), t)

    @classmethod
    def from_params(cls, x):
        """Inverse of :meth:`params`: axis-angle then translation."""
        x = np.asarray(x, dtype=np.float64)
        return cls(exp_so3(x[:3]), x[3:6])

    def params(self):
        return np.concatenate([log_so3(self.rotation), self.translation])

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    def transform_points(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def to_dict(self):
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.size != 9 or len(d["translation"]) != 3:
            raise ValueError("pose needs 9 rotation and 3 translation numbers")
        return cls(_reorthonormalize(rot.reshape(3, 3)), d["translation"])

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self):
        w = log_so3(self.rotation)
        return (
            f"RigidTransform(rotvec={np.array2string(w, precision=6)}, "
            f"t={np.array2string(self.translation, precision=6)})"
        )


def _reorthonormalize(R):
    # values round-tripped through JSON text can drift by an ulp or two
    if np.abs(R.T @ R - np.eye(3)).max() <= _ORTHO_TOL:
        return R
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.abs(Rn - R).max() > 1e-6:
        raise ValueError("rotation is not orthonormal")
    return Rn


@dataclass(frozen=True)
class ScanPose:
    scan_id: str
    pose: RigidTransform


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    # projecting back keeps long chains inside the 1e-9 orthonormality band
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def apply(t: RigidTransform, c: PointCloud, frame: Optional[str] = None) -> PointCloud:
    return PointCloud(
        t.transform_points(c.xyz), c.intensity, c.scan_id, frame or c.frame
    )


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
