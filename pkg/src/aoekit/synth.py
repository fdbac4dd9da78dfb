"""Seeded synthetic ground truth: trajectories, hand tracks, pixels, corruptions
and fleet scenarios.

Every generator is a pure function of its seed and parameters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import CameraIntrinsics, PoseSE3, project_points, quat_from_rotvec, quat_multiply
from .kinematics import FrameOfReference, HandTrack, joint_velocities
from .metrics import Trajectory
from .qc import AnnotatedClip

DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=1000.0, fy=1000.0, cx=960.0, cy=540.0, width=1920, height=1080, k1=1e-3, k2=-2e-4, k3=0.0
)
CONTROL_SPACING_S = 1.0


def _rng(seed, *tags):
    return np.random.default_rng([int(seed), *(int(t) for t in tags)])


# --------------------------------------------------------------------------
# camera trajectory
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectorySplines:
    position: CubicSpline
    rotvec: CubicSpline
    knots: np.ndarray

    def acceleration_bound(self):
        """Per-axis bound on ``|d2 position / dt2|``.

        A cubic spline's second derivative is piecewise linear, so its extreme
        values sit on the knots.
        """
        return np.max(np.abs(self.position(self.knots, 2)), axis=0)


def trajectory_splines(seed, duration_s, pos_step_m=0.15, rot_step_deg=6.0) -> TrajectorySplines:
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    rng = _rng(seed, 1)
    n_knots = max(2, int(math.ceil(duration_s / CONTROL_SPACING_S)) + 1)
    knots = np.arange(n_knots) * CONTROL_SPACING_S
    pos = np.cumsum(rng.normal(0.0, pos_step_m, size=(n_knots, 3)), axis=0)
    pos -= pos[0]
    rot = np.cumsum(rng.normal(0.0, math.radians(rot_step_deg), size=(n_knots, 3)), axis=0)
    rot -= rot[0]
    return TrajectorySplines(
        CubicSpline(knots, pos, bc_type="clamped"),
        CubicSpline(knots, rot, bc_type="clamped"),
        knots,
    )


def gen_trajectory(seed, duration_s, fps) -> Trajectory:
    """Smooth ground-truth camera trajectory sampled uniformly at ``fps``."""
    if not fps > 0:
        raise ValueError("fps must be positive")
    sp = trajectory_splines(seed, duration_s)
    n = max(2, int(round(duration_s * fps)))
    t = np.arange(n) / float(fps)
    return Trajectory(t, sp.position(t), quat_from_rotvec(sp.rotvec(t)))


# --------------------------------------------------------------------------
# hand tracks
# --------------------------------------------------------------------------

# finger bases relative to the wrist (metres) and segment lengths per finger
_FINGER_BASES = np.array(
    [[-0.035, 0.030, 0.0], [-0.020, 0.085, 0.0], [0.000, 0.090, 0.0], [0.020, 0.085, 0.0], [0.038, 0.075, 0.0]]
)
_SEGMENTS = np.array(
    [[0.035, 0.030, 0.025], [0.040, 0.025, 0.020], [0.045, 0.028, 0.022], [0.040, 0.026, 0.020], [0.032, 0.020, 0.018]]
)


def hand_template(seed):
    """21 joints (wrist + 4 per finger) inside a 20 cm box, seeded jitter."""
    rng = _rng(seed, 2)
    joints = [np.zeros(3)]
    for f in range(5):
        direction = np.array([0.25 * (f - 2) / 2.0, 1.0, 0.15 * rng.standard_normal()])
        direction /= np.linalg.norm(direction)
        p = _FINGER_BASES[f] + rng.normal(0.0, 0.002, 3)
        joints.append(p.copy())
        for seg in _SEGMENTS[f] * (1.0 + rng.normal(0.0, 0.05, 3)):
            p = p + seg * direction
            joints.append(p.copy())
    tpl = np.array(joints)
    return tpl - tpl.mean(axis=0)


@dataclass(frozen=True, eq=False)
class HandSample:
    world: HandTrack
    camera: HandTrack
    pixels: np.ndarray
    intrinsics: CameraIntrinsics


# Clean clips keep their natural world-frame speed peak at least half a sigma
# under the 3-sigma QC filter, so that only injected spikes are flagged.
CLEAN_PEAK_SIGMA = 2.5


def _peak_sigma(t, joints):
    sp = joint_velocities(HandTrack(1.0 / float(np.median(np.diff(t))), t, joints)).speeds
    sd = float(sp.std())
    return (float(sp.max()) - float(sp.mean())) / sd if sd > 0 else 0.0


def gen_hand_track(traj: Trajectory, seed, intr: CameraIntrinsics = DEFAULT_INTRINSICS) -> HandSample:
    """Rigid hand template animated smoothly in front of the camera.

    The camera-frame track is built first; the world track applies each
    world-from-camera pose; pixels project the camera-frame joints. Motion
    draws whose world-frame speed peak exceeds ``CLEAN_PEAK_SIGMA`` are
    redrawn (the least peaked draw is kept if none qualifies).
    """
    rng = _rng(seed, 3)
    tpl = hand_template(seed)
    t = traj.timestamps
    poses = [traj.pose(i) for i in range(len(t))]
    best = None
    for attempt in range(100):
        freq = rng.uniform(0.3, 0.7, 3) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi, 3)
        amp = np.array([0.08, 0.05, 0.04])
        centre = np.array([0.0, 0.05, 0.42]) + amp * np.sin(np.outer(t, freq) + phase)
        rfreq = rng.uniform(0.2, 0.5, 3) * 2 * np.pi
        rphase = rng.uniform(0, 2 * np.pi, 3)
        base_rot = np.array([-0.6, 0.0, 0.0]) + rng.normal(0.0, 0.1, 3)
        rotvec = base_rot + 0.25 * np.sin(np.outer(t, rfreq) + rphase)
        quats = quat_from_rotvec(rotvec)
        cam = np.stack([PoseSE3(q, c).apply(tpl) for q, c in zip(quats, centre)])
        if not np.all(cam[..., 2] > 0.05):
            continue
        world = np.stack([p.apply(c) for p, c in zip(poses, cam)])
        peak = _peak_sigma(t, world) if len(t) >= 3 else 0.0
        if best is None or peak < best[0]:
            best = (peak, cam, world)
        if peak <= CLEAN_PEAK_SIGMA:
            break
    if best is None:  # pragma: no cover - amplitudes keep the hand in front of the camera
        raise RuntimeError("could not place the hand in front of the camera")
    _, cam, world = best

    rate = 1.0 / float(np.median(np.diff(t)))
    cam_track = HandTrack(rate, t, cam, FrameOfReference.CAMERA)
    world_track = HandTrack(rate, t, world, FrameOfReference.WORLD)
    return HandSample(world_track, cam_track, project_points(intr, cam), intr)


# --------------------------------------------------------------------------
# corruption
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise levels plus a spike schedule of ``(frame, magnitude)``.

    For hand tracks a spike of magnitude ``m`` at frame ``f`` pushes every
    joint of that frame along its camera ray (a depth-scale glitch, invisible
    to reprojection) far enough that the joint speeds at ``f - 1`` and
    ``f + 1`` reach at least ``mean + m * sigma`` of the clip's pre-spike
    speed distribution. For trajectories the spike displaces the camera
    position by ``m * pos_sigma_m``.
    """

    pos_sigma_m: float = 0.0
    rot_sigma_deg: float = 0.0
    pixel_sigma_px: float = 0.0
    pixel_offset_px: tuple = (0.0, 0.0)
    spikes: tuple = ()

    def __post_init__(self):
        if min(self.pos_sigma_m, self.rot_sigma_deg, self.pixel_sigma_px) < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class PerturbationLog:
    spikes: list = field(default_factory=list)  # [(frame, magnitude)]
    spike_offsets: dict = field(default_factory=dict)  # frame -> additive offset
    position_noise: np.ndarray | None = None
    rotation_noise: np.ndarray | None = None  # quaternions applied on the left
    pixel_noise: np.ndarray | None = None

    @property
    def spike_frames(self):
        return [f for f, _ in self.spikes]

    def to_dict(self):
        return {"spikes": [[int(f), float(m)] for f, m in self.spikes]}


def _ray_spike_offsets(track: HandTrack, camera_traj, frame, magnitude, base_mean, base_sigma):
    x = track.joints
    t = track.timestamps
    if not 2 <= frame <= len(track) - 3:
        raise ValueError(f"spike frame {frame} must leave two frames on each side")
    speeds = joint_velocities(track).speeds
    target = base_mean + magnitude * base_sigma
    vmax = float(np.max(speeds[[frame - 1, frame + 1]]))
    gap = max(t[frame] - t[frame - 2], t[frame + 2] - t[frame])
    needed = (target + vmax) * gap
    if camera_traj is not None and track.frame_of_reference is FrameOfReference.WORLD:
        j = int(np.argmin(np.abs(camera_traj.timestamps - t[frame])))
        centre = camera_traj.positions[j]
    else:
        centre = np.zeros(3)
    rays = x[frame] - centre
    dist = np.linalg.norm(rays, axis=1)
    scale = needed / float(dist.min())
    return rays * scale


def perturb(data, model: NoiseModel, seed, camera_traj: Trajectory | None = None):
    """Corrupt a HandTrack, a Trajectory or a pixel array; returns ``(data', log)``."""
    rng = _rng(seed, 4)
    log = PerturbationLog()
    if isinstance(data, HandTrack):
        joints = data.joints.copy()
        if model.pos_sigma_m > 0:
            log.position_noise = rng.normal(0.0, model.pos_sigma_m, joints.shape)
            joints = joints + log.position_noise
        out = data.with_joints(joints)
        if model.spikes:
            speeds = joint_velocities(out).speeds
            mean, sigma = float(speeds.mean()), float(speeds.std())
            sigma = max(sigma, 1e-3)
            spiked = out.joints.copy()
            for frame, mag in model.spikes:
                off = _ray_spike_offsets(out, camera_traj, int(frame), float(mag), mean, sigma)
                spiked[int(frame)] += off
                log.spike_offsets[int(frame)] = off
                log.spikes.append((int(frame), float(mag)))
            out = out.with_joints(spiked)
        return out, log
    if isinstance(data, Trajectory):
        pos = data.positions.copy()
        quats = data.quaternions.copy()
        if model.pos_sigma_m > 0:
            log.position_noise = rng.normal(0.0, model.pos_sigma_m, pos.shape)
            pos = pos + log.position_noise
        if model.rot_sigma_deg > 0:
            log.rotation_noise = quat_from_rotvec(rng.normal(0.0, math.radians(model.rot_sigma_deg), pos.shape))
            quats = quat_multiply(log.rotation_noise, quats)
        for frame, mag in model.spikes:
            d = rng.normal(size=3)
            off = d / np.linalg.norm(d) * float(mag) * model.pos_sigma_m
            pos[int(frame)] += off
            log.spike_offsets[int(frame)] = off
            log.spikes.append((int(frame), float(mag)))
        return Trajectory(data.timestamps, pos, quats), log
    pix = np.array(data, dtype=float)
    if pix.shape[-1] != 2:
        raise TypeError(f"cannot perturb object of type {type(data).__name__}")
    noise = np.zeros_like(pix)
    if model.pixel_sigma_px > 0:
        noise = noise + rng.normal(0.0, model.pixel_sigma_px, pix.shape)
    noise = noise + np.asarray(model.pixel_offset_px, dtype=float)
    log.pixel_noise = noise
    return pix + noise, log


def revert(data, log: PerturbationLog):
    """Remove every logged corruption (inverse of :func:`perturb`)."""
    if isinstance(data, HandTrack):
        joints = data.joints.copy()
        for frame, off in log.spike_offsets.items():
            joints[frame] -= off
        if log.position_noise is not None:
            joints -= log.position_noise
        return data.with_joints(joints)
    if isinstance(data, Trajectory):
        pos = data.positions.copy()
        quats = data.quaternions
        for frame, off in log.spike_offsets.items():
            pos[frame] -= off
        if log.position_noise is not None:
            pos -= log.position_noise
        if log.rotation_noise is not None:
            inv = log.rotation_noise * np.array([1.0, -1.0, -1.0, -1.0])
            quats = quat_multiply(inv, quats)
        return Trajectory(data.timestamps, pos, quats)
    pix = np.asarray(data, dtype=float)
    return pix - (log.pixel_noise if log.pixel_noise is not None else 0.0)


# --------------------------------------------------------------------------
# QC corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Corpus:
    clips: list
    log: dict  # clip_id -> {"spikes": [[frame, magnitude]], "pixel_offset_px": [du, dv]}
    gt: dict = field(default_factory=dict)  # clip_id -> HandSample

    @property
    def spiked_ids(self):
        return {cid for cid, entry in self.log.items() if entry["spikes"]}

    @property
    def offset_ids(self):
        return {cid for cid, entry in self.log.items() if any(entry["pixel_offset_px"])}


def gen_clip(clip_id, seed, duration_s=3.0, fps=30.0, pos_sigma_m=0.0003, pixel_sigma_px=0.5,
             spikes=(), pixel_offset_px=(0.0, 0.0), intr=DEFAULT_INTRINSICS):
    """One annotated clip: estimated world joints, camera trajectory, intrinsics, observed pixels."""
    traj = gen_trajectory(seed, duration_s, fps)
    sample = gen_hand_track(traj, seed, intr)
    track, tlog = perturb(sample.world, NoiseModel(pos_sigma_m=pos_sigma_m, spikes=tuple(spikes)), seed,
                          camera_traj=traj)
    pixels, _ = perturb(sample.pixels, NoiseModel(pixel_sigma_px=pixel_sigma_px, pixel_offset_px=pixel_offset_px),
                        seed)
    clip = AnnotatedClip(clip_id, track, traj, intr, pixels)
    entry = {"spikes": [[int(f), float(m)] for f, m in tlog.spikes],
             "pixel_offset_px": [float(v) for v in pixel_offset_px]}
    return clip, entry, sample


def gen_corpus(seed, n_clips=100, spike_fraction=0.3, offset_fraction=0.0, offset_px=6.0,
               magnitude_range=(10.0, 20.0), duration_s=3.0, fps=30.0, **clip_kwargs) -> Corpus:
    """Clip corpus with a logged subset of velocity spikes and pixel offsets."""
    rng = _rng(seed, 5)
    clips, log, gt = [], {}, {}
    n_frames = int(round(duration_s * fps))
    for k in range(n_clips):
        cid = f"clip-{seed}-{k:04d}"
        spikes = ()
        if rng.random() < spike_fraction:
            spikes = ((int(rng.integers(3, n_frames - 3)), float(rng.uniform(*magnitude_range))),)
        offset = (0.0, 0.0)
        if rng.random() < offset_fraction:
            ang = rng.uniform(0, 2 * np.pi)
            offset = (offset_px * math.cos(ang), offset_px * math.sin(ang))
        clip_seed = int(rng.integers(0, 2**31 - 1))
        clip, entry, sample = gen_clip(cid, clip_seed, duration_s, fps, spikes=spikes,
                                       pixel_offset_px=offset, **clip_kwargs)
        clips.append(clip)
        log[cid] = entry
        gt[cid] = sample
    return Corpus(clips, log, gt)


# --------------------------------------------------------------------------
# fleet scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioRecipe:
    seed: int = 0
    n_regions: int = 3
    n_devices: int = 100
    spread_km: float = 500.0
    min_separation_km: float = 6000.0
    upload_interval_s: float = 60.0
    workload: tuple = ()  # ((start_s, multiplier), ...)
    partitions: tuple = ()
    routing: str = "GEO_DNS_PLUS_PROBES"
    named: str | None = None


def load_named_scenario(name):
    path = resources.files("aoekit") / "data" / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"no built-in scenario named {name!r}")
    return json.loads(path.read_text(encoding="utf-8"))


def builtin_scenarios():
    return sorted(p.name[:-5] for p in (resources.files("aoekit") / "data").iterdir() if p.name.endswith(".json"))


EARTH_RADIUS_KM = 6371.0


def destination_point(lat, lon, bearing_rad, dist_km):
    phi1, lam1 = math.radians(lat), math.radians(lon)
    d = dist_km / EARTH_RADIUS_KM
    phi2 = math.asin(math.sin(phi1) * math.cos(d) + math.cos(phi1) * math.sin(d) * math.cos(bearing_rad))
    lam2 = lam1 + math.atan2(math.sin(bearing_rad) * math.sin(d) * math.cos(phi1),
                             math.cos(d) - math.sin(phi1) * math.sin(phi2))
    lon2 = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    if lon2 == -180.0:
        lon2 = 180.0
    return math.degrees(phi2), lon2


def scatter_devices(regions, n_devices, spread_km, rng):
    """Place devices round-robin around regions, uniformly within ``spread_km``."""
    devices = []
    for i in range(n_devices):
        r = regions[i % len(regions)]
        dist = spread_km * math.sqrt(rng.random())
        lat, lon = destination_point(r["lat"], r["lon"], rng.uniform(0, 2 * math.pi), dist)
        devices.append({"id": f"dev-{i:05d}", "lat": lat, "lon": lon, "home": r["id"]})
    return devices


def gen_fleet_topology(recipe: ScenarioRecipe) -> dict:
    """Scenario dictionary (the fleet scenario file format) built from a recipe."""
    from .fleetsim import haversine_km

    if recipe.named:
        scen = load_named_scenario(recipe.named)
        return scen
    if recipe.n_regions < 1 or recipe.n_devices < 1:
        raise ValueError("need at least one region and one device")
    rng = _rng(recipe.seed, 6)
    regions = []
    for _ in range(100000):
        if len(regions) == recipe.n_regions:
            break
        z = rng.uniform(-0.85, 0.85)
        lat = math.degrees(math.asin(z))
        lon = rng.uniform(-180.0, 180.0)
        if all(haversine_km((lat, lon), (r["lat"], r["lon"])) >= recipe.min_separation_km for r in regions):
            regions.append({"id": f"region-{len(regions)}", "lat": lat, "lon": lon, "capacity": 200.0})
    else:  # pragma: no cover
        raise ValueError("could not place regions with the requested separation")
    central = {"id": "central", "lat": regions[0]["lat"], "lon": regions[0]["lon"]}
    return {
        "scenario": "generated",
        "seed": recipe.seed,
        "central": central,
        "regions": regions,
        "devices": scatter_devices(regions, recipe.n_devices, recipe.spread_km, rng),
        "latency": {"per_km": 0.05, "base": 5.0, "jitter_sigma": 0.2},
        "workload": {
            "upload_interval_s": recipe.upload_interval_s,
            "schedule": [list(w) for w in recipe.workload] or [[0.0, 1.0]],
        },
        "replication": {"interval_s": 3600.0},
        "partitions": [dict(p) for p in recipe.partitions],
        "routing": recipe.routing,
    }
