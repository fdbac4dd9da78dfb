"""Rigid/similarity transforms, pinhole projection and point-set alignment.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays. Rotation matrices are
derived on demand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import BehindCamera, DegenerateInput, ZeroReference
from .validation import check_points

RANK_TOL = 1e-12


# --------------------------------------------------------------------------
# quaternion helpers (vectorised over leading axes)
# --------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("quaternion must be finite and non-zero")
    return q / n


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Shepperd's method; returns the representative with ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 rotation matrix")
    tr = np.trace(m)
    diag = np.diag(m)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def quat_from_rotvec(v):
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x)/x series near zero keeps tiny rotations exact
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), v * k], axis=-1)


def quat_angle(q):
    """Rotation angle in radians, equal to ``2*acos(|w|)`` on ``[0, pi]``.

    Evaluated as ``2*atan2(|xyz|, |w|)``, which stays accurate for tiny angles
    where ``acos`` loses half the significant digits.
    """
    q = quat_normalize(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def quat_same_rotation(a, b, atol=1e-9):
    a = quat_normalize(a)
    b = quat_normalize(b)
    return bool(np.allclose(a, b, atol=atol) or np.allclose(a, -b, atol=atol))


def random_quat(rng):
    """Uniformly distributed unit quaternion."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def _vec3(v):
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"expected a finite 3-vector, got {v!r}")
    return v


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=float)))
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        rot = quat_multiply(self.rotation, other.rotation)
        return PoseSE3(rot, self.R @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        conj = quat_conjugate(self.rotation)
        return PoseSE3(conj, -(quat_to_matrix(conj) @ self.translation))

    def allclose(self, other: "PoseSE3", atol=1e-9):
        return quat_same_rotation(self.rotation, other.rotation, atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity transform ``p -> s R p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=float)))
        object.__setattr__(self, "translation", _vec3(self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_pose(cls, pose: PoseSE3, scale=1.0):
        return cls(scale, pose.rotation, pose.translation)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.scale * self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.R.T) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(
            self.scale * other.scale,
            quat_multiply(self.rotation, other.rotation),
            self.scale * (self.R @ other.translation) + self.translation,
        )

    def inverse(self) -> "Sim3Transform":
        conj = quat_conjugate(self.rotation)
        s = 1.0 / self.scale
        return Sim3Transform(s, conj, -s * (quat_to_matrix(conj) @ self.translation))

    def as_pose(self) -> PoseSE3:
        return PoseSE3(self.rotation, self.translation)

    def params(self):
        """7-vector ``(scale, qw, qx, qy, qz, tx, ty, tz)`` with ``qw >= 0``."""
        q = self.rotation if self.rotation[0] >= 0 else -self.rotation
        return np.concatenate([[self.scale], q, self.translation])

    def __repr__(self):
        return (
            f"Sim3Transform(scale={self.scale!r}, rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()})"
        )


def compose_se3(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose equivalent to applying ``b`` first, then ``a``."""
    return a.compose(b)


def invert_se3(p: PoseSE3) -> PoseSE3:
    return p.inverse()


def apply_sim3(t: Sim3Transform, p):
    return t.apply(p)


# --------------------------------------------------------------------------
# Umeyama alignment
# --------------------------------------------------------------------------

def _check_point_pair(src, dst):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or dst.shape != src.shape:
        raise DegenerateInput(f"need matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateInput("non-finite coordinates")
    return src, dst


def umeyama_align(src, dst, estimate_scale=True) -> Sim3Transform:
    """Closed-form least-squares transform mapping ``src`` onto ``dst``.

    Parameters
    ----------
    src, dst : array_like, shape (N, 3)
        Corresponding points, N >= 3.
    estimate_scale : bool
        Solve for a similarity (7 DoF). When False the scale is fixed to
        exactly 1 and a rigid transform (6 DoF) is returned.

    Raises
    ------
    DegenerateInput
        Fewer than 3 points, mismatched shapes, ``src`` of rank < 2 or a
        coincident ``dst``.
    """
    src, dst = _check_point_pair(src, dst)
    n = len(src)
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst

    sv = np.linalg.svd(src_c.T @ src_c / n, compute_uv=False)
    if sv[0] <= 0 or sv[1] < RANK_TOL * sv[0]:
        raise DegenerateInput("source points are collinear or coincident")
    if not np.any(dst_c):
        raise DegenerateInput("destination points are coincident")

    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rot = (u * s) @ vt

    if estimate_scale:
        var_src = np.sum(src_c**2) / n
        scale = float(np.dot(d, s) / var_src)
        if scale <= 0:
            raise DegenerateInput("alignment produced a non-positive scale")
    else:
        scale = 1.0
    trans = mu_dst - scale * (rot @ mu_src)
    return Sim3Transform(scale, matrix_to_quat(rot), trans)


def alignment_rmse(t: Sim3Transform, src, dst):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    return float(np.sqrt(np.mean(np.sum((t.apply(src) - dst) ** 2, axis=-1))))


# --------------------------------------------------------------------------
# camera model
# --------------------------------------------------------------------------

class PixelPoint(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "k1": self.k1, "k2": self.k2, "k3": self.k3,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
            float(d.get("k1", 0.0)), float(d.get("k2", 0.0)), float(d.get("k3", 0.0)),
        )


def project_points(intr: CameraIntrinsics, points, on_behind="raise"):
    """Project camera-frame points ``(..., 3)`` to pixels ``(..., 2)``.

    With ``on_behind="nan"`` points with ``z <= 0`` produce NaN pixels instead
    of raising :class:`BehindCamera`.
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    behind = z <= 0
    if np.any(behind):
        if on_behind == "raise":
            raise BehindCamera("point has non-positive depth")
        z = np.where(behind, np.nan, z)
    x = p[..., 0] / z
    y = p[..., 1] / z
    r2 = x * x + y * y
    radial = 1.0 + intr.k1 * r2 + intr.k2 * r2**2 + intr.k3 * r2**3
    return np.stack([intr.fx * x * radial + intr.cx, intr.fy * y * radial + intr.cy], axis=-1)


def project(intr: CameraIntrinsics, p_cam) -> PixelPoint:
    uv = project_points(intr, _vec3(p_cam))
    return PixelPoint(float(uv[0]), float(uv[1]))


def pixels_to_normalized(intr: CameraIntrinsics, pixels):
    """Invert the linear part of the projection (distortion is not undone)."""
    pix = np.asarray(pixels, dtype=float)
    return np.stack([(pix[..., 0] - intr.cx) / intr.fx, (pix[..., 1] - intr.cy) / intr.fy], axis=-1)


# --------------------------------------------------------------------------
# calibration deviation
# --------------------------------------------------------------------------

DEVIATION_PARAMS = ("fx", "fy", "cx", "cy")


@dataclass(frozen=True)
class DeviationReport:
    """Relative deviation of factory intrinsics against a reference calibration.

    ``std_pct`` is the population standard deviation (divide by N) over the
    relative deviations of ``fx, fy, cx, cy``. Distortion coefficients are
    reported as absolute differences only.
    """

    per_param_pct: dict
    mean_pct: float
    std_pct: float
    distortion_abs: dict
    params_used: tuple = DEVIATION_PARAMS
    std_kind: str = "population"

    def to_dict(self):
        return {
            "per_param_pct": dict(self.per_param_pct),
            "mean_pct": self.mean_pct,
            "std_pct": self.std_pct,
            "distortion_abs": dict(self.distortion_abs),
            "params_used": list(self.params_used),
            "std_kind": self.std_kind,
        }


def intrinsics_deviation(factory: CameraIntrinsics, reference: CameraIntrinsics) -> DeviationReport:
    per = {}
    for name in DEVIATION_PARAMS:
        ref = getattr(reference, name)
        if ref == 0:
            raise ZeroReference(f"reference {name} is zero")
        per[name] = 100.0 * abs(getattr(factory, name) - ref) / abs(ref)
    vals = np.array([per[n] for n in DEVIATION_PARAMS])
    dist = {k: abs(getattr(factory, k) - getattr(reference, k)) for k in ("k1", "k2", "k3")}
    return DeviationReport(per, float(vals.mean()), float(vals.std()), dist)


# --------------------------------------------------------------------------
# estimator wrapper
# --------------------------------------------------------------------------


class SimilarityAligner(TransformerMixin, BaseEstimator):
    """Fit a Sim(3)/SE(3) transform from source points ``X`` onto targets ``y``.

    After ``fit``, ``transform`` maps any point set through the estimated
    transform, so the aligner can sit inside a scikit-learn pipeline.
    """

    def __init__(self, estimate_scale=True):
        self.estimate_scale = estimate_scale

    def fit(self, X, y):
        X = check_points(X, "X", min_points=3)
        y = check_points(y, "y", min_points=3)
        self.transform_ = umeyama_align(X, y, estimate_scale=self.estimate_scale)
        self.scale_ = self.transform_.scale
        self.rotation_ = self.transform_.rotation
        self.translation_ = self.transform_.translation
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_points(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse().apply(check_points(X))

    def score(self, X, y):
        """Negative RMSE of the aligned points (higher is better)."""
        check_is_fitted(self, "transform_")
        return -alignment_rmse(self.transform_, check_points(X), check_points(y))
