"""Hand-track frame changes, joint velocities, 3-sigma outlier flags and smoothing."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solveh_banded
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import BadWindow, NoOverlap, TooShort, WindowTooLarge
from .metrics import Trajectory, associate
from .validation import check_joints, check_series, check_timestamps

DEFAULT_WINDOW = 11
DEFAULT_LAMBDA_ACC = 10.0
DEFAULT_SIGMA_K = 3.0
# sigma at or below this (relative to the mean speed) is float round-off
DEGENERATE_RTOL = 1e-9
DEGENERATE_ATOL = 1e-15


class FrameOfReference(str, Enum):
    CAMERA = "camera"
    WORLD = "world"


@dataclass(frozen=True, eq=False)
class HandTrack:
    """A sequence of 21-joint hand frames sampled at ``frame_rate`` Hz."""

    frame_rate: float
    timestamps: np.ndarray
    joints: np.ndarray
    frame_of_reference: FrameOfReference = FrameOfReference.CAMERA

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        t = check_timestamps(self.timestamps)
        j = check_joints(self.joints) if len(t) else np.zeros((0, 21, 3))
        if len(j) != len(t):
            raise ValueError("one timestamp per frame is required")
        if len(t) > 2:
            period = float(np.median(np.diff(t)))
            if abs(period * self.frame_rate - 1.0) > 0.1:
                raise ValueError(
                    f"median frame period {period:.6f}s inconsistent with frame_rate {self.frame_rate}"
                )
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "frame_of_reference", FrameOfReference(self.frame_of_reference))

    def __len__(self):
        return len(self.timestamps)

    def with_joints(self, joints, frame_of_reference=None) -> "HandTrack":
        return replace(
            self,
            joints=np.asarray(joints, dtype=float),
            frame_of_reference=frame_of_reference or self.frame_of_reference,
        )

    def subset(self, idx) -> "HandTrack":
        idx = np.asarray(idx)
        return replace(self, timestamps=self.timestamps[idx], joints=self.joints[idx])


def match_poses(track: HandTrack, camera_traj: Trajectory):
    pairs = associate(track.timestamps, camera_traj.timestamps, 0.5 / track.frame_rate)
    return pairs[:, 0], pairs[:, 1]


def to_world(track: HandTrack, camera_traj: Trajectory, return_dropped=False):
    """Map camera-frame joints to world coordinates with world-from-camera poses.

    Frames without a pose within half a frame period are dropped. With
    ``return_dropped=True`` the dropped-frame count is returned as well.
    """
    if track.frame_of_reference is not FrameOfReference.CAMERA:
        raise ValueError("track is already in the world frame")
    try:
        fi, pj = match_poses(track, camera_traj)
    except NoOverlap as exc:
        raise NoOverlap("no hand frame has an associated camera pose") from exc
    rots = camera_traj.rotation_matrices()[pj]
    world = np.einsum("fij,fkj->fki", rots, track.joints[fi]) + camera_traj.positions[pj][:, None, :]
    out = HandTrack(track.frame_rate, track.timestamps[fi], world, FrameOfReference.WORLD)
    dropped = len(track) - len(fi)
    return (out, dropped) if return_dropped else out


def to_camera(track: HandTrack, camera_traj: Trajectory, return_dropped=False):
    """Inverse of :func:`to_world`."""
    if track.frame_of_reference is not FrameOfReference.WORLD:
        raise ValueError("track is already in the camera frame")
    try:
        fi, pj = match_poses(track, camera_traj)
    except NoOverlap as exc:
        raise NoOverlap("no hand frame has an associated camera pose") from exc
    rots = camera_traj.rotation_matrices()[pj]
    rel = track.joints[fi] - camera_traj.positions[pj][:, None, :]
    cam = np.einsum("fji,fkj->fki", rots, rel)
    out = HandTrack(track.frame_rate, track.timestamps[fi], cam, FrameOfReference.CAMERA)
    dropped = len(track) - len(fi)
    return (out, dropped) if return_dropped else out


# --------------------------------------------------------------------------
# velocities and outliers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VelocityProfile:
    timestamps: np.ndarray
    speeds: np.ndarray  # (frames, joints), m/s

    def __len__(self):
        return len(self.timestamps)


def joint_velocities(track: HandTrack) -> VelocityProfile:
    """Per-frame, per-joint speed.

    Interior frames use central differences ``(x[i+1]-x[i-1]) / (t[i+1]-t[i-1])``;
    the first and last frame use one-sided differences.
    """
    if len(track) < 3:
        raise TooShort(f"need at least 3 frames, got {len(track)}")
    x = track.joints
    t = track.timestamps
    vel = np.empty_like(x)
    vel[1:-1] = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None, None]
    vel[0] = (x[1] - x[0]) / (t[1] - t[0])
    vel[-1] = (x[-1] - x[-2]) / (t[-1] - t[-2])
    return VelocityProfile(t.copy(), np.linalg.norm(vel, axis=-1))


@dataclass(frozen=True, eq=False)
class OutlierFlags:
    flags: np.ndarray
    sigma_used: float
    mean_used: float
    k: float
    degenerate_sigma: bool = False

    @property
    def frames(self):
        return [int(i) for i in np.flatnonzero(self.flags)]

    def to_dict(self):
        return {
            "frames": self.frames,
            "sigma_used": self.sigma_used,
            "mean_used": self.mean_used,
            "k": self.k,
            "degenerate_sigma": self.degenerate_sigma,
        }


class VelocityOutlierDetector(BaseEstimator):
    """Flag frames where any joint speed exceeds ``mean + k * sigma``.

    ``fit`` computes the mean and population standard deviation over every
    (frame, joint) speed of one clip; ``predict`` returns a boolean per frame.
    When sigma is round-off sized the clip is treated as constant-speed and
    only speeds that differ from the mean by more than round-off are flagged.
    """

    def __init__(self, k=DEFAULT_SIGMA_K):
        self.k = k

    def fit(self, X, y=None):
        X, _ = check_series(X, "speeds")
        if len(X) < 3:
            raise TooShort(f"need at least 3 frames, got {len(X)}")
        self.mean_ = float(np.mean(X))
        self.sigma_ = float(np.std(X))
        self.tol_ = DEGENERATE_RTOL * abs(self.mean_) + DEGENERATE_ATOL
        self.degenerate_ = self.sigma_ <= self.tol_
        self.n_features_in_ = X.shape[1]
        return self

    def threshold(self):
        check_is_fitted(self, "mean_")
        return self.mean_ + self.k * self.sigma_

    def predict(self, X):
        check_is_fitted(self, "mean_")
        X, _ = check_series(X, "speeds")
        if not np.isfinite(self.k):
            return np.zeros(len(X), dtype=bool)
        if self.degenerate_:
            return np.any(np.abs(X - self.mean_) > self.tol_, axis=1)
        return np.any(X > self.threshold(), axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


def detect_outliers(profile: VelocityProfile, k=DEFAULT_SIGMA_K) -> OutlierFlags:
    det = VelocityOutlierDetector(k=k)
    flags = det.fit_predict(profile.speeds)
    return OutlierFlags(flags, det.sigma_, det.mean_, float(k), bool(det.degenerate_))


# --------------------------------------------------------------------------
# sliding-window smoother
# --------------------------------------------------------------------------

def second_difference_matrix(n):
    d = np.zeros((n - 2, n))
    for i in range(n - 2):
        d[i, i : i + 3] = (1.0, -2.0, 1.0)
    return d


def total_squared_acceleration(x):
    x = np.asarray(x, dtype=float)
    return float(np.sum((x[:-2] - 2.0 * x[1:-1] + x[2:]) ** 2))


def _banded_system(window, lambda_acc):
    d = second_difference_matrix(window)
    a = np.eye(window) + lambda_acc * d.T @ d
    ab = np.zeros((3, window))
    ab[2] = np.diag(a)
    ab[1, 1:] = np.diag(a, 1)
    ab[0, 2:] = np.diag(a, 2)
    return ab


def _check_window(window, n_frames):
    if int(window) != window or window < 3 or window % 2 == 0:
        raise BadWindow(f"window must be an odd integer >= 3, got {window}")
    if window > n_frames:
        raise WindowTooLarge(f"window {window} exceeds {n_frames} frames")


def smooth_series(x, window=DEFAULT_WINDOW, lambda_acc=DEFAULT_LAMBDA_ACC):
    """Sliding-window penalised least squares on a ``(frames, features)`` array.

    Each window solves ``min |x - obs|^2 + lambda_acc * |D2 x|^2`` per feature
    and contributes only its centre sample; the first/last ``window // 2``
    frames take the first/last window's solution.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    _check_window(window, n)
    if lambda_acc < 0:
        raise ValueError("lambda_acc must be >= 0")
    if lambda_acc == 0:
        return x.copy()
    window = int(window)
    h = window // 2
    wins = sliding_window_view(x, window, axis=0)  # (n_win, features, window)
    n_win, n_feat = wins.shape[:2]
    rhs = np.moveaxis(wins, -1, 0).reshape(window, n_win * n_feat)
    sol = solveh_banded(_banded_system(window, lambda_acc), rhs).reshape(window, n_win, n_feat)
    out = np.empty_like(x)
    out[h : n - h] = sol[h]
    out[:h] = sol[:h, 0]
    out[n - h :] = sol[h + 1 :, -1]
    return out


class KinematicSmoother(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`smooth_series` for any ``(frames, ...)`` array."""

    def __init__(self, window=DEFAULT_WINDOW, lambda_acc=DEFAULT_LAMBDA_ACC):
        self.window = window
        self.lambda_acc = lambda_acc

    def fit(self, X, y=None):
        X2, _ = check_series(X)
        _check_window(self.window, len(X2))
        if self.lambda_acc < 0:
            raise ValueError("lambda_acc must be >= 0")
        self.n_features_in_ = X2.shape[1]
        return self

    def transform(self, X):
        X2, shape = check_series(X)
        return smooth_series(X2, self.window, self.lambda_acc).reshape(shape)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


def sliding_window_smooth(track: HandTrack, window=DEFAULT_WINDOW, lambda_acc=DEFAULT_LAMBDA_ACC) -> HandTrack:
    smoothed = KinematicSmoother(window, lambda_acc).fit_transform(track.joints)
    return track.with_joints(smoothed)
