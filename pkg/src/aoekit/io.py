"""Readers and writers for trajectory, joint, pixel and report files.

Floats are written with ``repr`` so every file round-trips bit-exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import CameraIntrinsics
from .metrics import Trajectory

N_JOINTS = 21


def _fmt(x):
    return repr(float(x))


def read_tum(path) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` lines are comments."""
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(path, lineno, f"expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError(path, lineno, "non-finite value")
            if rows and vals[0] <= rows[-1][0]:
                raise ParseError(path, lineno, "timestamps must be strictly increasing")
            if not any(vals[4:]):
                raise ParseError(path, lineno, "zero quaternion")
            rows.append(vals)
    if not rows:
        raise ParseError(path, 0, "no samples")
    a = np.array(rows)
    quats = a[:, [7, 4, 5, 6]]  # file is (qx qy qz qw), memory is (w x y z)
    return Trajectory(a[:, 0], a[:, 1:4], quats)


def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        vals = [t, *p, q[1], q[2], q[3], q[0]]
        lines.append(" ".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_tum(path, traj: Trajectory):
    Path(path).write_text(format_tum(traj), encoding="utf-8")


def _read_jsonl(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, exc.msg) from None


def read_joints_jsonl(path):
    """Read ``{"t": seconds, "joints": [[x, y, z] x 21]}`` lines -> (timestamps, (F, 21, 3))."""
    path = Path(path)
    ts, frames = [], []
    for lineno, obj in _read_jsonl(path):
        try:
            t = float(obj["t"])
            j = np.asarray(obj["joints"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad frame record: {exc}") from None
        if j.shape != (N_JOINTS, 3):
            raise ParseError(path, lineno, f"expected {N_JOINTS}x3 joints, got {j.shape}")
        ts.append(t)
        frames.append(j)
    if not frames:
        raise ParseError(path, 0, "no frames")
    return np.array(ts), np.stack(frames)


def format_joints_jsonl(timestamps, joints) -> str:
    out = []
    for t, j in zip(timestamps, joints):
        out.append(json.dumps({"t": float(t), "joints": np.asarray(j, dtype=float).tolist()}))
    return "\n".join(out) + "\n"


def write_joints_jsonl(path, timestamps, joints):
    Path(path).write_text(format_joints_jsonl(timestamps, joints), encoding="utf-8")


def read_pixels_jsonl(path):
    """Read ``{"t": seconds, "pixels": [[u, v] x 21]}`` lines -> (timestamps, (F, 21, 2))."""
    path = Path(path)
    ts, frames = [], []
    for lineno, obj in _read_jsonl(path):
        try:
            t = float(obj["t"])
            p = np.asarray(obj["pixels"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"bad pixel record: {exc}") from None
        if p.shape != (N_JOINTS, 2):
            raise ParseError(path, lineno, f"expected {N_JOINTS}x2 pixels, got {p.shape}")
        ts.append(t)
        frames.append(p)
    if not frames:
        raise ParseError(path, 0, "no frames")
    return np.array(ts), np.stack(frames)


def write_pixels_jsonl(path, timestamps, pixels):
    out = [json.dumps({"t": float(t), "pixels": np.asarray(p, dtype=float).tolist()})
           for t, p in zip(timestamps, pixels)]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        return CameraIntrinsics.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, 1, f"bad intrinsics: {exc}") from None


def write_intrinsics(path, intr: CameraIntrinsics):
    Path(path).write_text(dumps(intr.to_dict()), encoding="utf-8")


def dumps(obj, pretty=False) -> str:
    """Canonical JSON used for every report (sorted keys, newline-terminated)."""
    if pretty:
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None


# --------------------------------------------------------------------------
# corpus directories
# --------------------------------------------------------------------------
#   DIR/manifest.json            {"format", "seed", "clips": [ids], "log": {id: {...}}}
#   DIR/clips/<id>/meta.json     {"clip_id", "frame_rate"}
#   DIR/clips/<id>/trajectory.tum
#   DIR/clips/<id>/joints.jsonl  world-frame joint estimates
#   DIR/clips/<id>/pixels.jsonl  observed 2D keypoints
#   DIR/clips/<id>/intrinsics.json

CORPUS_FORMAT = "aoekit-corpus/1"
_CLIP_FILES = ("meta.json", "trajectory.tum", "joints.jsonl", "pixels.jsonl", "intrinsics.json")


def write_clip(directory, clip):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "meta.json", {"clip_id": clip.clip_id, "frame_rate": float(clip.track.frame_rate)})
    write_tum(d / "trajectory.tum", clip.trajectory)
    write_joints_jsonl(d / "joints.jsonl", clip.track.timestamps, clip.track.joints)
    write_pixels_jsonl(d / "pixels.jsonl", clip.track.timestamps, clip.observed)
    write_intrinsics(d / "intrinsics.json", clip.intrinsics)


def read_clip(directory):
    from .kinematics import FrameOfReference, HandTrack
    from .qc import AnnotatedClip

    d = Path(directory)
    missing = [f for f in _CLIP_FILES if not (d / f).is_file()]
    if missing:
        raise ParseError(d, 0, f"clip directory lacks {missing}")
    meta = read_json(d / "meta.json")
    t, joints = read_joints_jsonl(d / "joints.jsonl")
    tp, pixels = read_pixels_jsonl(d / "pixels.jsonl")
    if len(tp) != len(t) or np.any(tp != t):
        raise ParseError(d / "pixels.jsonl", 0, "pixel timestamps differ from joint timestamps")
    track = HandTrack(float(meta["frame_rate"]), t, joints, FrameOfReference.WORLD)
    return AnnotatedClip(str(meta["clip_id"]), track, read_tum(d / "trajectory.tum"),
                         read_intrinsics(d / "intrinsics.json"), pixels)


def write_corpus(directory, clips, log=None, seed=None):
    d = Path(directory)
    (d / "clips").mkdir(parents=True, exist_ok=True)
    for c in clips:
        write_clip(d / "clips" / c.clip_id, c)
    write_json(d / "manifest.json", {"format": CORPUS_FORMAT, "seed": seed, "clips": [c.clip_id for c in clips],
                                     "log": log or {}})


def read_corpus(directory):
    """``(clips, manifest)`` in manifest order."""
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise ParseError(d, 0, "not a corpus directory (manifest.json missing)")
    manifest = read_json(d / "manifest.json")
    if manifest.get("format") != CORPUS_FORMAT:
        raise ParseError(d / "manifest.json", 1, f"unsupported corpus format {manifest.get('format')!r}")
    return [read_clip(d / "clips" / cid) for cid in manifest["clips"]], manifest
