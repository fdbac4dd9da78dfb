"""Quality-control stage: velocity and reprojection filters, inspection sampling
and the hard-negative pool.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import AllBehindCamera, AoeError, NoOverlap, NotAFailure
from .geometry import CameraIntrinsics, project_points
from .kinematics import (
    FrameOfReference,
    HandTrack,
    match_poses,
    detect_outliers,
    joint_velocities,
)
from .metrics import Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QCThresholds:
    sigma_k: float = 3.0
    reproj_px: float = 5.0
    inspect_rate: float = 0.05

    def __post_init__(self):
        if not self.sigma_k > 0:
            raise ValueError("sigma_k must be positive")
        if not self.reproj_px > 0:
            raise ValueError("reproj_px must be positive")
        if not 0.0 <= self.inspect_rate <= 1.0:
            raise ValueError("inspect_rate must be in [0, 1]")


class Outcome(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    INSPECT_SAMPLED = "INSPECT_SAMPLED"


class ReasonKind(str, Enum):
    VELOCITY_OUTLIER = "VELOCITY_OUTLIER"
    REPROJECTION = "REPROJECTION"
    MALFORMED = "MALFORMED"


class Category(str, Enum):
    KINEMATIC = "KINEMATIC"
    REPROJECTION = "REPROJECTION"
    BOTH = "BOTH"


@dataclass(frozen=True)
class Reason:
    kind: ReasonKind
    frames: tuple = ()
    mean_px: float | None = None
    detail: str | None = None

    def to_dict(self):
        d = {"kind": self.kind.value}
        if self.kind is ReasonKind.VELOCITY_OUTLIER:
            d["frames"] = list(self.frames)
        elif self.kind is ReasonKind.REPROJECTION:
            d["mean_px"] = self.mean_px
        else:
            d["detail"] = self.detail
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(ReasonKind(d["kind"]), tuple(d.get("frames", ())), d.get("mean_px"), d.get("detail"))


@dataclass(frozen=True)
class QCVerdict:
    clip_id: str
    outcome: Outcome
    reasons: tuple = ()
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.outcome is Outcome.FAIL and not self.reasons:
            raise ValueError("a FAIL verdict needs at least one reason")
        if self.outcome is not Outcome.FAIL and self.reasons:
            raise ValueError("only FAIL verdicts carry reasons")

    @property
    def reason_kinds(self):
        return [r.kind for r in self.reasons]

    def to_dict(self):
        return {
            "clip_id": self.clip_id,
            "outcome": self.outcome.value,
            "reasons": [r.to_dict() for r in self.reasons],
            "stats": dict(self.stats),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["clip_id"], Outcome(d["outcome"]),
                   tuple(Reason.from_dict(r) for r in d["reasons"]), dict(d.get("stats", {})))


@dataclass(frozen=True, eq=False)
class AnnotatedClip:
    """Everything the QC stage needs for one clip.

    ``observed`` holds 21 pixel observations per track frame, index-aligned
    with ``track``.
    """

    clip_id: str
    track: HandTrack
    trajectory: Trajectory
    intrinsics: CameraIntrinsics
    observed: np.ndarray


# --------------------------------------------------------------------------
# reprojection
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReprojectionResult:
    per_frame_px: np.ndarray  # NaN where a frame has no usable joint
    clip_mean_px: float
    max_px: float
    n_behind: int
    n_dropped_frames: int


def reprojection_error(world_track: HandTrack, camera_traj: Trajectory,
                       intr: CameraIntrinsics, observed) -> ReprojectionResult:
    """Pixel distance between projected world joints and observed keypoints.

    Frames without a camera pose are dropped; joints behind the camera are
    excluded and counted. The clip mean is taken over every valid joint.
    """
    if world_track.frame_of_reference is not FrameOfReference.WORLD:
        raise ValueError("reprojection needs a world-frame track")
    observed = np.asarray(observed, dtype=float)
    if observed.shape != (len(world_track), 21, 2):
        raise ValueError(f"observed must have shape ({len(world_track)}, 21, 2), got {observed.shape}")
    try:
        fi, pj = match_poses(world_track, camera_traj)
    except NoOverlap as exc:
        raise NoOverlap("no hand frame has an associated camera pose") from exc
    rots = camera_traj.rotation_matrices()[pj]
    rel = world_track.joints[fi] - camera_traj.positions[pj][:, None, :]
    cam = np.einsum("fji,fkj->fki", rots, rel)
    pix = project_points(intr, cam, on_behind="nan")
    err = np.linalg.norm(pix - observed[fi], axis=-1)
    valid = np.isfinite(err)
    n_behind = int((~valid).sum())
    if not valid.any():
        raise AllBehindCamera("every joint is behind the camera")
    per_frame = np.full(len(world_track), np.nan)
    counts = valid.sum(axis=1)
    sums = np.where(valid, err, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_frame[fi] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    vals = err[valid]
    return ReprojectionResult(per_frame, float(vals.mean()), float(vals.max()), n_behind,
                              len(world_track) - len(fi))


# --------------------------------------------------------------------------
# inspection sampling
# --------------------------------------------------------------------------

def inspection_hash(clip_id: str) -> float:
    """BLAKE2b-64 of the UTF-8 clip id mapped to ``[0, 1)``."""
    digest = hashlib.blake2b(clip_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def sample_for_inspection(clip_id: str, rate: float) -> bool:
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    return inspection_hash(clip_id) < rate


# --------------------------------------------------------------------------
# verdicts
# --------------------------------------------------------------------------

def check_clip(clip: AnnotatedClip, thresholds: QCThresholds = QCThresholds()) -> QCVerdict:
    reasons = []
    stats = {}
    try:
        flags = detect_outliers(joint_velocities(clip.track), k=thresholds.sigma_k)
        reproj = reprojection_error(clip.track, clip.trajectory, clip.intrinsics, clip.observed)
    except (AoeError, ValueError) as exc:
        logger.info("clip %s malformed: %s", clip.clip_id, exc)
        reason = Reason(ReasonKind.MALFORMED, detail=f"{type(exc).__name__}: {exc}")
        return QCVerdict(clip.clip_id, Outcome.FAIL, (reason,), {})

    stats["flagged_frames"] = len(flags.frames)
    stats["speed_mean"] = flags.mean_used
    stats["speed_sigma"] = flags.sigma_used
    stats["reproj_mean_px"] = reproj.clip_mean_px
    stats["reproj_max_px"] = reproj.max_px
    stats["behind_camera"] = reproj.n_behind

    if flags.frames:
        reasons.append(Reason(ReasonKind.VELOCITY_OUTLIER, frames=tuple(flags.frames)))
    if reproj.clip_mean_px > thresholds.reproj_px:
        reasons.append(Reason(ReasonKind.REPROJECTION, mean_px=reproj.clip_mean_px))
    if reasons:
        return QCVerdict(clip.clip_id, Outcome.FAIL, tuple(reasons), stats)
    if sample_for_inspection(clip.clip_id, thresholds.inspect_rate):
        return QCVerdict(clip.clip_id, Outcome.INSPECT_SAMPLED, (), stats)
    return QCVerdict(clip.clip_id, Outcome.PASS, (), stats)


def is_pass(verdict: QCVerdict) -> bool:
    return verdict.outcome is not Outcome.FAIL


# --------------------------------------------------------------------------
# hard-negative pool
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HardNegativeEntry:
    clip_id: str
    reasons: tuple
    category: Category
    enqueued_at: float

    def to_dict(self):
        return {
            "clip_id": self.clip_id,
            "reasons": [r.to_dict() for r in self.reasons],
            "category": self.category.value,
            "enqueued_at": self.enqueued_at,
        }


def category_for(reasons) -> Category:
    kinds = {r.kind for r in reasons}
    vel = ReasonKind.VELOCITY_OUTLIER in kinds
    rep = ReasonKind.REPROJECTION in kinds
    if vel and rep:
        return Category.BOTH
    if vel:
        return Category.KINEMATIC
    if rep:
        return Category.REPROJECTION
    raise NotAFailure("malformed-only verdicts belong in the error bin, not the hard-negative pool")


class HardNegativePool:
    """Insertion-ordered pool of failed clips, one entry per clip id.

    ``drain(KINEMATIC)`` and ``drain(REPROJECTION)`` also take ``BOTH``
    entries, since those need either kind of re-annotation.
    """

    def __init__(self):
        self._entries: dict[str, HardNegativeEntry] = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, clip_id):
        return clip_id in self._entries

    def __iter__(self):
        return iter(list(self._entries.values()))

    def add(self, entry: HardNegativeEntry):
        self._entries.pop(entry.clip_id, None)
        self._entries[entry.clip_id] = entry

    def get(self, clip_id):
        return self._entries[clip_id]

    def drain(self, category: Category | None = None):
        if category is None:
            taken = list(self._entries.values())
        else:
            category = Category(category)
            wanted = {category} if category is Category.BOTH else {category, Category.BOTH}
            taken = [e for e in self._entries.values() if e.category in wanted]
        for e in taken:
            del self._entries[e.clip_id]
        return taken

    def to_list(self):
        return [e.to_dict() for e in self._entries.values()]


def route_failed(verdict: QCVerdict, pool: HardNegativePool, now: float = 0.0) -> HardNegativeEntry:
    if verdict.outcome is not Outcome.FAIL:
        raise NotAFailure(f"clip {verdict.clip_id} has outcome {verdict.outcome.value}")
    entry = HardNegativeEntry(verdict.clip_id, verdict.reasons, category_for(verdict.reasons), float(now))
    pool.add(entry)
    return entry
