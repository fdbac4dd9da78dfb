"""Egocentric data-collection toolkit: trajectory and hand-pose metrics, QC,
a versioned DAG pipeline engine, an edge-ingestion fleet simulator, the
recording-app state machine and seeded synthetic fixtures.
"""
__version__ = "0.1.0"

from .errors import AoeError  # noqa: E402
from .geometry import (  # noqa: E402
    CameraIntrinsics,
    PoseSE3,
    SimilarityAligner,
    Sim3Transform,
    project,
    project_points,
    umeyama_align,
)
from .kinematics import (  # noqa: E402
    HandTrack,
    KinematicSmoother,
    VelocityOutlierDetector,
    detect_outliers,
    joint_velocities,
    sliding_window_smooth,
    to_camera,
    to_world,
)
from .metrics import Alignment, Trajectory, ate, evaluate_hand, evaluate_trajectory, mpjpe, pa_mpjpe, pck_auc, rpe  # noqa: E402
from .qc import QCThresholds, check_clip, sample_for_inspection  # noqa: E402

__all__ = [
    "AoeError", "Alignment", "CameraIntrinsics", "HandTrack", "KinematicSmoother", "PoseSE3", "QCThresholds",
    "SimilarityAligner", "Sim3Transform", "Trajectory", "VelocityOutlierDetector", "ate", "check_clip",
    "detect_outliers", "evaluate_hand", "evaluate_trajectory", "joint_velocities", "mpjpe", "pa_mpjpe", "pck_auc",
    "project", "project_points", "rpe", "sample_for_inspection", "sliding_window_smooth", "to_camera", "to_world",
    "umeyama_align",
]
