"""Always-on recording app: trigger/release hysteresis, review, batch upload.

The recorder is a pure transition function over an immutable
:class:`Recorder` snapshot. Time is kept in integer microseconds so duration
accounting is exact. :class:`DeviceAgent` is a thin mutable wrapper that
talks to a fleet upload handle and applies acks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

from .errors import BadTrimRange, NothingApproved, OutOfOrderEvent

US = 1_000_000


def to_us(seconds) -> int:
    return int(round(float(seconds) * US))


class DeviceState(str, Enum):
    """Recorder modes (first three) and per-clip states (last four)."""

    UNAUTHORIZED = "UNAUTHORIZED"
    MONITORING = "MONITORING"
    RECORDING = "RECORDING"
    LOCAL_SAVED = "LOCAL_SAVED"  # review pending
    AUTHORIZED = "AUTHORIZED"  # approved for upload
    UPLOADING = "UPLOADING"
    UPLOADED = "UPLOADED"


RECORDER_MODES = (DeviceState.UNAUTHORIZED, DeviceState.MONITORING, DeviceState.RECORDING)


@dataclass(frozen=True)
class DeviceConfig:
    trigger_threshold: float = 0.6
    release_threshold: float = 0.4
    min_duration_s: float = 3.0
    release_hold_s: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.release_threshold <= self.trigger_threshold <= 1.0:
            raise ValueError("need 0 <= release_threshold <= trigger_threshold <= 1")
        if self.min_duration_s < 0 or self.release_hold_s < 0:
            raise ValueError("durations must be >= 0")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


class DetectorEvent(NamedTuple):
    t: float
    hand_present: bool
    interaction_score: float


@dataclass(frozen=True)
class LocalClip:
    clip_id: str
    start_us: int
    end_us: int
    state: DeviceState = DeviceState.LOCAL_SAVED
    approved: bool = False
    trim_us: tuple | None = None  # (start, end) inside [start_us, end_us]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.end_us > self.start_us:
            raise ValueError("clip end must be after its start")

    @property
    def range_us(self):
        return self.trim_us or (self.start_us, self.end_us)

    @property
    def duration_us(self) -> int:
        a, b = self.range_us
        return b - a

    @property
    def duration_s(self) -> float:
        return self.duration_us / US

    def to_dict(self):
        a, b = self.range_us
        return {"clip_id": self.clip_id, "start_t": self.start_us / US, "end_t": self.end_us / US,
                "trim": [a / US, b / US], "state": self.state.value, "approved": self.approved,
                "duration_s": self.duration_s}


@dataclass(frozen=True)
class Recorder:
    """Immutable device snapshot; every operation returns a new one."""

    device_id: str = "dev-00000"
    mode: DeviceState = DeviceState.UNAUTHORIZED
    last_t_us: int | None = None
    rec_start_us: int | None = None
    below_since_us: int | None = None
    clips: tuple = ()  # gallery, insertion ordered
    next_seq: int = 0
    dropped_events: int = 0
    discarded_count: int = 0
    discarded_us: int = 0
    saved_us: int = 0  # durations at save time, before any trim
    rejected_count: int = 0
    metadata: dict = field(default_factory=dict)  # intrinsics + sensor fields attached to every clip

    def clip(self, clip_id) -> LocalClip:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)

    def _swap(self, new: LocalClip) -> "Recorder":
        return replace(self, clips=tuple(new if c.clip_id == new.clip_id else c for c in self.clips))

    @property
    def storage_us(self) -> int:
        return sum(c.duration_us for c in self.clips if c.state is not DeviceState.UPLOADED)


# actions emitted by on_event
class Action(NamedTuple):
    kind: str  # START, SAVE, DISCARD, DROP
    t: float
    clip_id: str | None = None
    duration_s: float | None = None


def authorize(state: Recorder) -> Recorder:
    if state.mode is DeviceState.UNAUTHORIZED:
        return replace(state, mode=DeviceState.MONITORING)
    return state


def _stop(state: Recorder, end_us: int, config: DeviceConfig):
    start = state.rec_start_us
    dur = end_us - start
    base = replace(state, mode=DeviceState.MONITORING, rec_start_us=None, below_since_us=None)
    if dur <= 0 or dur < to_us(config.min_duration_s):
        base = replace(base, discarded_count=base.discarded_count + 1, discarded_us=base.discarded_us + max(dur, 0))
        return base, [Action("DISCARD", end_us / US, None, max(dur, 0) / US)]
    cid = f"{state.device_id}-{state.next_seq:05d}"
    clip = LocalClip(cid, start, end_us, metadata=dict(state.metadata))
    base = replace(base, clips=base.clips + (clip,), next_seq=base.next_seq + 1, saved_us=base.saved_us + dur)
    return base, [Action("SAVE", end_us / US, cid, dur / US)]


def on_event(state: Recorder, ev: DetectorEvent, config: DeviceConfig = DeviceConfig()):
    """Advance the recorder by one detector event; returns ``(state', actions)``.

    Recording starts on an event with a hand present and score at or above
    the trigger. It stops once the score has stayed below the release
    threshold (or the hand has been absent) for ``release_hold_s``; the clip
    ends where that quiet stretch began. Clips shorter than
    ``min_duration_s`` are discarded.
    """
    t = to_us(ev.t)
    if state.last_t_us is not None and t < state.last_t_us:
        raise OutOfOrderEvent(f"event at t={ev.t} precedes t={state.last_t_us / US}")
    state = replace(state, last_t_us=t)
    if state.mode is DeviceState.UNAUTHORIZED:
        return replace(state, dropped_events=state.dropped_events + 1), [Action("DROP", ev.t)]
    active = bool(ev.hand_present) and ev.interaction_score >= config.trigger_threshold
    if state.mode is DeviceState.MONITORING:
        if active:
            return replace(state, mode=DeviceState.RECORDING, rec_start_us=t, below_since_us=None), \
                [Action("START", ev.t)]
        return state, []
    # RECORDING
    quiet = (not ev.hand_present) or ev.interaction_score < config.release_threshold
    if not quiet:
        return replace(state, below_since_us=None), []
    since = state.below_since_us if state.below_since_us is not None else t
    if t - since >= to_us(config.release_hold_s):
        return _stop(replace(state, below_since_us=since), since, config)
    return replace(state, below_since_us=since), []


def end_stream(state: Recorder, config: DeviceConfig = DeviceConfig()):
    """Close an open recording when the event stream ends."""
    if state.mode is not DeviceState.RECORDING:
        return state, []
    end = state.below_since_us if state.below_since_us is not None else state.last_t_us
    return _stop(state, end, config)


def replay(events, config: DeviceConfig = DeviceConfig(), state: Recorder | None = None, authorized=True):
    """Fold a whole event stream (closing any open recording at the end)."""
    state = state or Recorder()
    if authorized:
        state = authorize(state)
    actions = []
    for ev in events:
        state, acts = on_event(state, ev if isinstance(ev, DetectorEvent) else DetectorEvent(*ev), config)
        actions.extend(acts)
    state, acts = end_stream(state, config)
    return state, actions + acts


# --------------------------------------------------------------------------
# review and upload
# --------------------------------------------------------------------------

def review(state: Recorder, clip_id: str, decision, trim=None) -> Recorder:
    """``decision`` is ``"approve"``, ``"reject"`` or ``"trim"`` (with ``trim=(start_s, end_s)``)."""
    clip = state.clip(clip_id)
    if clip.state not in (DeviceState.LOCAL_SAVED, DeviceState.AUTHORIZED):
        raise ValueError(f"clip {clip_id} is {clip.state.value}, not reviewable")
    if decision == "approve":
        return state._swap(replace(clip, approved=True, state=DeviceState.AUTHORIZED))
    if decision == "reject":
        return replace(state, clips=tuple(c for c in state.clips if c.clip_id != clip_id),
                       rejected_count=state.rejected_count + 1)
    if decision == "trim":
        if trim is None:
            raise BadTrimRange("trim needs a (start, end) range")
        a, b = to_us(trim[0]), to_us(trim[1])
        if not clip.start_us <= a < b <= clip.end_us:
            raise BadTrimRange(f"trim {trim} outside clip [{clip.start_us / US}, {clip.end_us / US}]")
        return state._swap(replace(clip, trim_us=(a, b), approved=True, state=DeviceState.AUTHORIZED))
    raise ValueError(f"unknown review decision {decision!r}")


class UploadJob(NamedTuple):
    job_id: str
    clip_ids: tuple


def upload_metadata(clip: LocalClip) -> dict:
    a, b = clip.range_us
    meta = dict(clip.metadata)
    meta.update({"clip_id": clip.clip_id, "start_t": a / US, "end_t": b / US,
                 "tags": sorted(set(meta.get("tags", ())) | {"deidentified"})})
    return meta


def begin_upload(state: Recorder):
    """Move every approved clip to UPLOADING; returns ``(state', job, metadata list)``."""
    ready = [c for c in state.clips if c.state is DeviceState.AUTHORIZED]
    if not ready:
        raise NothingApproved("no approved clips to upload")
    if any(not c.approved for c in ready):  # AUTHORIZED is only reachable through review()
        raise RuntimeError("unapproved clip in AUTHORIZED state")
    new = state
    for c in ready:
        new = new._swap(replace(c, state=DeviceState.UPLOADING))
    job = UploadJob(f"{state.device_id}-job-{state.next_seq:05d}-{len(ready)}", tuple(c.clip_id for c in ready))
    return new, job, [upload_metadata(c) for c in ready]


def on_ack(state: Recorder, clip_id: str) -> Recorder:
    clip = state.clip(clip_id)
    if clip.state is DeviceState.UPLOADED:
        return state
    if clip.state is not DeviceState.UPLOADING:
        raise ValueError(f"ack for clip {clip_id} in state {clip.state.value}")
    return state._swap(replace(clip, state=DeviceState.UPLOADED))


def dashboard_stats(state: Recorder) -> dict:
    return {
        "total_recorded_s": (state.saved_us + state.discarded_us) / US,
        "effective_interaction_s": sum(c.duration_us for c in state.clips) / US,
        "uploaded_count": sum(c.state is DeviceState.UPLOADED for c in state.clips),
        "discarded_count": state.discarded_count,
    }


class DeviceAgent:
    """Mutable holder of a :class:`Recorder` wired to a fleet upload handle."""

    def __init__(self, device_id, config: DeviceConfig = DeviceConfig(), metadata=None):
        self.config = config
        self.state = Recorder(device_id=device_id, metadata=dict(metadata or {}))
        self.log = []

    def authorize(self):
        self.state = authorize(self.state)

    def feed(self, events):
        for ev in events:
            ev = ev if isinstance(ev, DetectorEvent) else DetectorEvent(*ev)
            self.state, acts = on_event(self.state, ev, self.config)
            self.log.extend(acts)

    def close(self):
        self.state, acts = end_stream(self.state, self.config)
        self.log.extend(acts)

    def review(self, clip_id, decision, trim=None):
        self.state = review(self.state, clip_id, decision, trim)

    def batch_upload(self, handle) -> UploadJob:
        self.state, job, metas = begin_upload(self.state)
        for meta in metas:
            handle.upload(self.state.device_id, meta["clip_id"], meta=meta, on_ack=self._ack)
        return job

    def retry_unacked(self, handle):
        """Re-send clips still waiting for an ack (e.g. after a lost ack)."""
        pending = [c for c in self.state.clips if c.state is DeviceState.UPLOADING]
        for c in pending:
            handle.upload(self.state.device_id, c.clip_id, meta=upload_metadata(c), on_ack=self._ack)
        return [c.clip_id for c in pending]

    def _ack(self, clip_id, node_id=None, t_s=None):
        self.state = on_ack(self.state, clip_id)

    def stats(self):
        return dashboard_stats(self.state)


def read_events_jsonl(path):
    """``{"t", "hand_present", "interaction_score"}`` per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(DetectorEvent(float(d["t"]), bool(d["hand_present"]), float(d["interaction_score"])))
    return out


def scripted_stream(segments, dt=0.1, t0=0.0):
    """Events every ``dt`` seconds over ``[(duration_s, hand_present, score), ...]`` segments."""
    events = []
    k = 0
    for dur, hand, score in segments:
        for _ in range(int(round(dur / dt))):
            events.append(DetectorEvent(round(t0 + k * dt, 9), bool(hand), float(score)))
            k += 1
    return events
