"""Trajectory (ATE / ATE-S / RPE) and hand-pose (MPJPE / PA-MPJPE / PCK-AUC) metrics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput, InsufficientPairs, LengthMismatch, NoOverlap
from .geometry import (
    PoseSE3,
    Sim3Transform,
    quat_angle,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    umeyama_align,
)
from .validation import N_JOINTS, check_joints, check_timestamps

logger = logging.getLogger(__name__)

DEFAULT_AUC_MAX_MM = 50.0
DEFAULT_AUC_STEPS = 100


class Alignment(str, Enum):
    SIM3 = "sim3"
    SE3 = "se3"


class JointFrame(NamedTuple):
    t: float
    joints: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped camera poses (world-from-camera)."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        t = check_timestamps(self.timestamps)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = quat_normalize(np.asarray(self.quaternions, dtype=float).reshape(-1, 4))
        if not (len(t) == len(p) == len(q)):
            raise ValueError("timestamps, positions and quaternions must have equal length")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quaternions", q)

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_poses(cls, timestamps, poses: Sequence[PoseSE3]):
        return cls(
            timestamps,
            np.array([p.translation for p in poses]).reshape(-1, 3),
            np.array([p.rotation for p in poses]).reshape(-1, 4),
        )

    def pose(self, i) -> PoseSE3:
        return PoseSE3(self.quaternions[i], self.positions[i])

    def poses(self):
        return [self.pose(i) for i in range(len(self))]

    def rotation_matrices(self):
        return quat_to_matrix(self.quaternions)

    def left_transformed(self, t: Sim3Transform | PoseSE3) -> "Trajectory":
        """Apply ``t`` on the left of every pose (a change of world frame)."""
        scale = getattr(t, "scale", 1.0)
        pos = scale * (self.positions @ t.R.T) + t.translation
        quats = quat_multiply(np.broadcast_to(t.rotation, self.quaternions.shape), self.quaternions)
        return Trajectory(self.timestamps, pos, quats)

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx)
        return Trajectory(self.timestamps[idx], self.positions[idx], self.quaternions[idx])

    def allclose(self, other: "Trajectory", atol=1e-9):
        if len(self) != len(other):
            return False
        dots = np.abs(np.sum(self.quaternions * other.quaternions, axis=1))
        return bool(
            np.allclose(self.timestamps, other.timestamps, atol=atol)
            and np.allclose(self.positions, other.positions, atol=atol)
            and np.all(np.abs(1.0 - dots) <= atol)
        )


def _timestamps(x):
    return x.timestamps if hasattr(x, "timestamps") else check_timestamps(x)


def default_max_dt(timestamps):
    """Half the median sampling interval."""
    t = np.asarray(timestamps, dtype=float)
    if len(t) < 2:
        raise InsufficientPairs("need at least 2 samples to infer a sampling interval")
    return 0.5 * float(np.median(np.diff(t)))


def associate(est, gt, max_dt=None):
    """Greedy nearest-timestamp matching.

    Candidate pairs with ``|dt| <= max_dt`` are accepted in order of increasing
    ``|dt|`` (ties by est index, then gt index); each sample is used at most
    once. Returns an ``(M, 2)`` integer array of ``(est_idx, gt_idx)`` sorted by
    time.
    """
    te = _timestamps(est)
    tg = _timestamps(gt)
    if max_dt is None:
        max_dt = default_max_dt(tg)
    if not max_dt > 0:
        raise ValueError("max_dt must be positive")

    lo = np.searchsorted(tg, te - max_dt, side="left")
    hi = np.searchsorted(tg, te + max_dt, side="right")
    counts = hi - lo
    if counts.sum() == 0:
        raise NoOverlap(f"no timestamps within {max_dt} s")
    ei = np.repeat(np.arange(len(te)), counts)
    gj = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]).astype(int)
    dt = np.abs(te[ei] - tg[gj])
    keep = dt <= max_dt
    ei, gj, dt = ei[keep], gj[keep], dt[keep]
    order = np.lexsort((gj, ei, dt))

    used_e = np.zeros(len(te), dtype=bool)
    used_g = np.zeros(len(tg), dtype=bool)
    pairs = []
    for k in order:
        i, j = ei[k], gj[k]
        if not used_e[i] and not used_g[j]:
            used_e[i] = used_g[j] = True
            pairs.append((i, j))
    if not pairs:
        raise NoOverlap(f"no timestamps within {max_dt} s")
    pairs.sort()
    return np.array(pairs, dtype=int)


def _aligned_positions(est: Trajectory, gt: Trajectory, alignment, max_dt):
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise DegenerateInput(f"ATE needs at least 3 associated pairs, got {len(pairs)}")
    src = est.positions[pairs[:, 0]]
    dst = gt.positions[pairs[:, 1]]
    t = umeyama_align(src, dst, estimate_scale=Alignment(alignment) is Alignment.SIM3)
    return t.apply(src), dst, t


def ate(est: Trajectory, gt: Trajectory, alignment=Alignment.SIM3, max_dt=None):
    """Absolute trajectory error (RMSE, metres) after global alignment.

    ``alignment="sim3"`` is the 7-DoF variant; ``"se3"`` keeps scale at 1
    (reported as ATE-S).
    """
    aligned, dst, _ = _aligned_positions(est, gt, alignment, max_dt)
    return float(np.sqrt(np.mean(np.sum((aligned - dst) ** 2, axis=1))))


def ate_with_transform(est, gt, alignment=Alignment.SIM3, max_dt=None):
    aligned, dst, t = _aligned_positions(est, gt, alignment, max_dt)
    return float(np.sqrt(np.mean(np.sum((aligned - dst) ** 2, axis=1)))), t


def _relative(quats, pos, a, b):
    # pose_a^-1 * pose_b for index arrays a, b
    qa_inv = quat_conjugate(quats[a])
    rot_a_t = np.swapaxes(quat_to_matrix(quats[a]), -1, -2)
    dq = quat_multiply(qa_inv, quats[b])
    dt = np.einsum("nij,nj->ni", rot_a_t, pos[b] - pos[a])
    return dq, dt


def rpe(est: Trajectory, gt: Trajectory, delta=1, max_dt=None):
    """Relative pose error over ``delta`` associated-pair steps.

    Returns ``(trans_rmse_m, rot_rmse_deg)``. No global alignment is applied.
    """
    if int(delta) < 1:
        raise ValueError("delta must be >= 1")
    delta = int(delta)
    pairs = associate(est, gt, max_dt)
    if len(pairs) <= delta:
        raise InsufficientPairs(f"{len(pairs)} pairs cannot form a relative pair at delta={delta}")
    ie, ig = pairs[:, 0], pairs[:, 1]
    a = np.arange(len(pairs) - delta)
    b = a + delta
    dq_e, dt_e = _relative(est.quaternions, est.positions, ie[a], ie[b])
    dq_g, dt_g = _relative(gt.quaternions, gt.positions, ig[a], ig[b])
    # E = rel_gt^-1 * rel_est
    rg_t = np.swapaxes(quat_to_matrix(dq_g), -1, -2)
    err_t = np.einsum("nij,nj->ni", rg_t, dt_e - dt_g)
    err_q = quat_multiply(quat_conjugate(dq_g), dq_e)
    trans = np.linalg.norm(err_t, axis=1)
    rot = np.degrees(quat_angle(err_q))
    return float(np.sqrt(np.mean(trans**2))), float(np.sqrt(np.mean(rot**2)))


# --------------------------------------------------------------------------
# hand pose metrics
# --------------------------------------------------------------------------

def joint_array(x, name="joints"):
    """Coerce a HandTrack, a list of JointFrame or an array to (F, 21, 3)."""
    if hasattr(x, "joints") and not isinstance(x, JointFrame):
        x = x.joints
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], JointFrame):
        x = np.stack([np.asarray(f.joints, dtype=float) for f in x])
    return check_joints(x, name)


def _pair(pred, gt):
    p = joint_array(pred, "pred")
    g = joint_array(gt, "gt")
    if p.shape != g.shape:
        raise LengthMismatch(f"pred has {len(p)} frames, gt has {len(g)}")
    return p, g


def joint_errors(pred, gt):
    """Per (frame, joint) Euclidean error in metres."""
    p, g = _pair(pred, gt)
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint position error in millimetres, without alignment."""
    return float(np.mean(joint_errors(pred, gt)) * 1000.0)


def pa_mpjpe_per_frame(pred, gt):
    """Per-frame mean joint error (mm) after per-frame Sim(3) alignment.

    Frames whose alignment is degenerate are NaN.
    """
    p, g = _pair(pred, gt)
    out = np.full(len(p), np.nan)
    for f in range(len(p)):
        try:
            t = umeyama_align(p[f], g[f], estimate_scale=True)
        except DegenerateInput:
            continue
        out[f] = np.mean(np.linalg.norm(t.apply(p[f]) - g[f], axis=-1)) * 1000.0
    return out


def pa_mpjpe(pred, gt):
    """Procrustes-aligned MPJPE in millimetres, averaged over valid frames."""
    per = pa_mpjpe_per_frame(pred, gt)
    valid = ~np.isnan(per)
    skipped = int((~valid).sum())
    if skipped:
        logger.warning("pa_mpjpe skipped %d degenerate frame(s)", skipped)
    if not valid.any():
        raise DegenerateInput("every frame was degenerate")
    return float(np.mean(per[valid]))


def pck_auc(pred, gt, max_threshold_mm=DEFAULT_AUC_MAX_MM, n_steps=DEFAULT_AUC_STEPS):
    """PCK curve at ``n_steps`` uniform thresholds in ``(0, max]`` and its normalised AUC.

    The trapezoid integral spans ``[0, max]``: the curve value at threshold 0
    (errors that are exactly zero) is the left endpoint. Returns
    ``(curve, auc)`` with ``curve`` a list of ``(threshold_mm, fraction)``.
    """
    if not max_threshold_mm > 0:
        raise ValueError("max_threshold_mm must be positive")
    if int(n_steps) < 2:
        raise ValueError("n_steps must be >= 2")
    n_steps = int(n_steps)
    err = np.sort(joint_errors(pred, gt).ravel() * 1000.0)
    total = len(err)
    thresholds = max_threshold_mm * np.arange(1, n_steps + 1) / n_steps
    frac = np.searchsorted(err, thresholds, side="right") / total
    frac0 = np.searchsorted(err, 0.0, side="right") / total
    area = 0.5 * frac0 + float(np.sum(frac[:-1])) + 0.5 * frac[-1]
    auc = float(area / n_steps)
    curve = [(float(t), float(f)) for t, f in zip(thresholds, frac)]
    return curve, auc


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryReport:
    ate_rmse_m: float
    ate_s_rmse_m: float
    rpe_trans_rmse_m: float
    rpe_rot_rmse_deg: float
    n_pairs: int

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PoseReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    auc: float
    n_frames: int

    def to_dict(self):
        return asdict(self)


def evaluate_trajectory(est, gt, rpe_delta=1, max_dt=None) -> TrajectoryReport:
    pairs = associate(est, gt, max_dt)
    trans, rot = rpe(est, gt, rpe_delta, max_dt)
    return TrajectoryReport(
        ate_rmse_m=ate(est, gt, Alignment.SIM3, max_dt),
        ate_s_rmse_m=ate(est, gt, Alignment.SE3, max_dt),
        rpe_trans_rmse_m=trans,
        rpe_rot_rmse_deg=rot,
        n_pairs=int(len(pairs)),
    )


def evaluate_hand(pred, gt, auc_max_mm=DEFAULT_AUC_MAX_MM, auc_steps=DEFAULT_AUC_STEPS) -> PoseReport:
    p, g = _pair(pred, gt)
    _, auc = pck_auc(p, g, auc_max_mm, auc_steps)
    return PoseReport(
        mpjpe_mm=mpjpe(p, g),
        pa_mpjpe_mm=pa_mpjpe(p, g),
        auc=auc,
        n_frames=int(len(p)),
    )


__all__ = [
    "Alignment", "JointFrame", "N_JOINTS", "PoseReport", "Trajectory", "TrajectoryReport",
    "associate", "ate", "ate_with_transform", "default_max_dt", "evaluate_hand",
    "evaluate_trajectory", "joint_array", "joint_errors", "mpjpe", "pa_mpjpe",
    "pa_mpjpe_per_frame", "pck_auc", "rpe",
]
