"""Discrete-event simulator of the edge ingestion tier.

Devices upload clips to regional ingestion nodes (or straight to the central
store), nodes replicate to central on a fixed interval, links can be
partitioned, and an optional processing tier behind ingestion is scaled by an
HPA-style autoscaler.

Simulated time is an integer number of microseconds and events are ordered by
``(time, insertion sequence)``, so a ``(scenario, seed)`` pair always yields the
same report.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .errors import NoHealthyNode, ScenarioError
from .pipeline import ResourceClass, WorkerPool

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
US = 1_000_000  # microseconds per second
N_PROBES = 3


def to_us(seconds) -> int:
    return int(round(float(seconds) * US))


# --------------------------------------------------------------------------
# geography and latency
# --------------------------------------------------------------------------

class GeoPoint(NamedTuple):
    lat: float
    lon: float

    @classmethod
    def checked(cls, lat, lon):
        lat, lon = float(lat), float(lon)
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 < lon <= 180.0:
            raise ValueError(f"longitude {lon} outside (-180, 180]")
        return cls(lat, lon)


def haversine_km(a, b) -> float:
    """Great-circle distance on a sphere of radius 6371 km."""
    phi1, phi2 = math.radians(a[0]), math.radians(b[0])
    dphi = phi2 - phi1
    dlam = math.radians(b[1] - a[1])
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class LatencyModel:
    """``(base + per_km * d) * exp(jitter_sigma * z)`` milliseconds, ``z ~ N(0, 1)``.

    ``jitter_sigma`` is the log-space standard deviation; 0 turns jitter off
    and no random numbers are drawn.
    """

    per_km: float = 0.05
    base: float = 5.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.per_km < 0 or self.base < 0 or self.jitter_sigma < 0:
            raise ValueError("latency model parameters must be >= 0")

    def nominal(self, dist_km) -> float:
        return self.base + self.per_km * dist_km

    def sample_km(self, dist_km, rng=None) -> float:
        ms = self.nominal(dist_km)
        if self.jitter_sigma > 0:
            ms *= math.exp(self.jitter_sigma * rng.standard_normal())
        return ms

    def sample(self, a, b, rng=None) -> float:
        return self.sample_km(haversine_km(a, b), rng)


def latency(model: LatencyModel, a, b, rng=None) -> float:
    return model.sample(a, b, rng)


@dataclass
class RegionNode:
    node_id: str
    location: GeoPoint
    ingest_capacity: float = 200.0
    healthy: bool = True
    penalty_ms: float = 0.0  # added to every latency towards this node
    store: dict = field(default_factory=dict)  # clip id -> receipt time (us)

    def __post_init__(self):
        self.location = GeoPoint.checked(*self.location)
        if not self.ingest_capacity > 0:
            raise ValueError(f"node {self.node_id}: capacity must be positive")

    @property
    def service_us(self) -> int:
        return max(1, to_us(1.0 / self.ingest_capacity))


class RoutingMode(str, Enum):
    CENTRALIZED = "CENTRALIZED"
    GEO_DNS = "GEO_DNS"
    GEO_DNS_PLUS_PROBES = "GEO_DNS_PLUS_PROBES"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"centralized": cls.CENTRALIZED, "geo": cls.GEO_DNS, "geodns": cls.GEO_DNS,
                   "geo_dns": cls.GEO_DNS, "probes": cls.GEO_DNS_PLUS_PROBES}
        key = str(value)
        return aliases.get(key.lower()) or cls(key.upper())


class RouteDecision(NamedTuple):
    node_id: str
    latency_ms: float
    probes: tuple  # ((node_id, ms), ...) in probe order; empty unless probing


def geo_candidates(location, nodes):
    """Healthy nodes ordered by (great-circle distance, node id)."""
    ranked = sorted((haversine_km(location, n.location), n.node_id, n) for n in nodes if n.healthy)
    return [(d, n) for d, _, n in ranked]


def route(location, nodes, model: LatencyModel, mode, rng=None, central_id="central",
          candidates=None) -> RouteDecision:
    """Pick an ingestion node for a device at ``location``.

    The returned latency is the one the upload experiences: for probe routing
    it is the winning probe, otherwise one draw towards the chosen node.
    ``candidates`` may carry a cached :func:`geo_candidates` result.
    """
    mode = RoutingMode.parse(mode)
    if mode is RoutingMode.CENTRALIZED:
        central = [n for n in nodes if n.node_id == central_id]
        if not central or not central[0].healthy:
            raise NoHealthyNode("central node unavailable")
        n = central[0]
        ms = model.sample(location, n.location, rng) + n.penalty_ms
        return RouteDecision(n.node_id, ms, ())
    cands = candidates if candidates is not None else geo_candidates(location, nodes)
    if not cands:
        raise NoHealthyNode("no healthy ingestion node")
    if mode is RoutingMode.GEO_DNS:
        d, n = cands[0]
        return RouteDecision(n.node_id, model.sample_km(d, rng) + n.penalty_ms, ())
    probes = tuple((n.node_id, model.sample_km(d, rng) + n.penalty_ms) for d, n in cands[:N_PROBES])
    best = min(probes, key=lambda p: (p[1], p[0]))
    return RouteDecision(best[0], best[1], probes)


# --------------------------------------------------------------------------
# autoscaler
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AutoscalerPolicy:
    queue_high: int = 40
    queue_low: int = 5
    latency_slo_ms: float = 4000.0
    evaluate_every_s: float = 10.0
    cooldown_s: float = 20.0
    step_up: int = 20
    step_down: int = 2
    min_workers: int = 8
    max_workers: int = 80

    def __post_init__(self):
        if not self.queue_low < self.queue_high:
            raise ValueError("queue_low must be < queue_high")
        if not 1 <= self.min_workers <= self.max_workers:
            raise ValueError("need 1 <= min_workers <= max_workers")
        if self.evaluate_every_s <= 0 or self.cooldown_s < 0:
            raise ValueError("evaluate_every_s must be > 0 and cooldown_s >= 0")
        if self.step_up < 1 or self.step_down < 1:
            raise ValueError("steps must be >= 1")


class Action(str, Enum):
    UP = "UP"
    DOWN = "DOWN"
    HOLD = "HOLD"


class ScaleDecision(NamedTuple):
    action: Action
    n: int
    target: int


class StageMetrics(NamedTuple):
    queue_depth: int
    p95_ms: float


def autoscale_tick(policy: AutoscalerPolicy, metrics, pool: WorkerPool, now,
                   last_action_at=None) -> ScaleDecision:
    """One HPA evaluation. Pure: the caller applies the decision to ``pool``.

    Scale-up wins over scale-down; anything inside the cooldown window of
    the previous non-HOLD decision, or clamped to a zero change, is HOLD.
    """
    if isinstance(metrics, dict):
        depth, p95 = metrics["queue_depth"], metrics["p95_ms"]
    else:
        depth, p95 = metrics
    cur = pool.current_workers
    hold = ScaleDecision(Action.HOLD, 0, cur)
    if depth > policy.queue_high or p95 > policy.latency_slo_ms:
        action, target = Action.UP, min(policy.max_workers, cur + policy.step_up)
    elif depth < policy.queue_low and p95 < policy.latency_slo_ms:
        action, target = Action.DOWN, max(policy.min_workers, cur - policy.step_down)
    else:
        return hold
    if last_action_at is not None and now - last_action_at < policy.cooldown_s:
        return hold
    if target == cur:
        return hold
    return ScaleDecision(action, abs(target - cur), target)


# --------------------------------------------------------------------------
# scenario
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationPolicy:
    interval_s: float = 3600.0

    def __post_init__(self):
        if not self.interval_s > 0:
            raise ValueError("replication interval must be positive")


@dataclass(frozen=True)
class Workload:
    """Piecewise-constant per-device upload rate.

    Each device uploads as a Poisson process with rate
    ``multiplier(t) / upload_interval_s``; ``schedule`` lists
    ``(start_s, multiplier)`` pieces starting at 0.
    """

    upload_interval_s: float = 60.0
    schedule: tuple = ((0.0, 1.0),)

    def __post_init__(self):
        sched = tuple((float(s), float(m)) for s, m in self.schedule)
        if not sched or sched[0][0] != 0.0:
            raise ValueError("workload schedule must start at t=0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("workload schedule starts must increase")
        if any(m < 0 for _, m in sched):
            raise ValueError("workload multipliers must be >= 0")
        if not self.upload_interval_s > 0:
            raise ValueError("upload_interval_s must be positive")
        object.__setattr__(self, "schedule", sched)

    def spikes(self):
        """``(onset_s, end_s)`` of every piece above the base multiplier."""
        base = self.schedule[0][1]
        out = []
        for i, (s, m) in enumerate(self.schedule):
            if m > base:
                end = self.schedule[i + 1][0] if i + 1 < len(self.schedule) else math.inf
                out.append((s, end))
        return out


@dataclass(frozen=True)
class Partition:
    node_id: str
    start_s: float
    duration_s: float | None  # None = permanent

    @property
    def end_s(self):
        return math.inf if self.duration_s is None else self.start_s + self.duration_s

    def to_dict(self):
        return {"node": self.node_id, "start_s": self.start_s, "duration_s": self.duration_s}


@dataclass(frozen=True)
class ProcessingConfig:
    """Processing tier fed by every newly ingested clip."""

    policy: AutoscalerPolicy = AutoscalerPolicy()
    initial_workers: int | None = None
    service_mean_s: float = 1.0
    service_dispersion: float = 0.25  # log-normal sigma, mean preserved
    metrics_window_s: float = 30.0

    def __post_init__(self):
        init = self.policy.min_workers if self.initial_workers is None else self.initial_workers
        if not self.policy.min_workers <= init <= self.policy.max_workers:
            raise ValueError("initial_workers outside [min, max]")
        object.__setattr__(self, "initial_workers", int(init))
        if self.service_mean_s <= 0 or self.service_dispersion < 0 or self.metrics_window_s <= 0:
            raise ValueError("bad processing cost model")


@dataclass(frozen=True)
class Device:
    device_id: str
    location: GeoPoint
    home: str | None = None


@dataclass(frozen=True, eq=False)
class FleetScenario:
    central: RegionNode
    regions: tuple
    devices: tuple
    latency: LatencyModel = LatencyModel()
    workload: Workload = Workload()
    replication: ReplicationPolicy = ReplicationPolicy()
    partitions: tuple = ()
    routing: RoutingMode = RoutingMode.GEO_DNS_PLUS_PROBES
    processing: ProcessingConfig | None = None
    snapshot_interval_s: float = 60.0
    name: str = "custom"
    seed: int = 0

    def nodes(self):
        return [self.central, *self.regions]

    def with_routing(self, mode):
        return replace(self, routing=RoutingMode.parse(mode))

    @classmethod
    def from_dict(cls, d) -> "FleetScenario":
        """Build and validate; every problem is collected into one :class:`ScenarioError`."""
        problems = []

        def grab(fn, what):
            try:
                return fn()
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"{what}: {exc}")
                return None

        seed = int(d.get("seed", 0))
        c = d.get("central")
        central = grab(lambda: RegionNode(c.get("id", "central"), (c["lat"], c["lon"]),
                                          float(c.get("capacity", 200.0)), bool(c.get("healthy", True)),
                                          float(c.get("penalty_ms", 0.0))), "central") if c else None
        if central is None and not c:
            problems.append("central: missing")
        regions = []
        for i, r in enumerate(d.get("regions", [])):
            node = grab(lambda r=r: RegionNode(str(r["id"]), (r["lat"], r["lon"]), float(r.get("capacity", 200.0)),
                                               bool(r.get("healthy", True)), float(r.get("penalty_ms", 0.0))),
                        f"regions[{i}]")
            if node is not None:
                regions.append(node)
        ids = [n.node_id for n in regions] + ([central.node_id] if central else [])
        if len(set(ids)) != len(ids):
            problems.append("node ids must be unique")
        if not regions and central is None:
            problems.append("at least one node is required")

        devices = []
        spec = d.get("devices")
        if isinstance(spec, dict):
            grab(lambda: devices.extend(_expand_devices(spec, [r for r in d.get("regions", [])], seed)), "devices")
        else:
            for i, dv in enumerate(spec or []):
                dev = grab(lambda dv=dv: Device(str(dv["id"]), GeoPoint.checked(dv["lat"], dv["lon"]), dv.get("home")),
                           f"devices[{i}]")
                if dev is not None:
                    devices.append(dev)
        if not devices:
            problems.append("at least one device is required")

        lat = d.get("latency", {})
        model = grab(lambda: LatencyModel(float(lat.get("per_km", 0.05)), float(lat.get("base", 5.0)),
                                          float(lat.get("jitter_sigma", 0.0))), "latency")
        wl = d.get("workload", {})
        workload = grab(lambda: Workload(float(wl.get("upload_interval_s", 60.0)),
                                         tuple(tuple(x) for x in wl.get("schedule", [[0.0, 1.0]]))), "workload")
        rep = grab(lambda: ReplicationPolicy(float(d.get("replication", {}).get("interval_s", 3600.0))),
                   "replication")
        routing = grab(lambda: RoutingMode.parse(d.get("routing", "GEO_DNS_PLUS_PROBES")), "routing")

        parts = []
        for i, p in enumerate(d.get("partitions", [])):
            part = grab(lambda p=p: _partition_from_dict(p), f"partitions[{i}]")
            if part is not None:
                if part.node_id not in ids:
                    problems.append(f"partitions[{i}]: unknown node {part.node_id!r}")
                parts.append(part)

        processing = None
        if d.get("processing"):
            pr = dict(d["processing"])
            pol = pr.pop("policy", {})
            processing = grab(lambda: ProcessingConfig(AutoscalerPolicy(**pol), **pr), "processing")
        snap = float(d.get("snapshot_interval_s", 60.0))
        if not snap > 0:
            problems.append("snapshot_interval_s must be positive")

        if problems:
            raise ScenarioError(problems)
        scen = cls(central, tuple(regions), tuple(devices), model, workload, rep, (), routing, processing,
                   snap, str(d.get("scenario", d.get("name", "custom"))), seed)
        for p in parts:
            scen = inject_partition(scen, p.node_id, p.start_s, p.duration_s)
        return scen

    def to_dict(self):
        def node(n):
            return {"id": n.node_id, "lat": n.location.lat, "lon": n.location.lon, "capacity": n.ingest_capacity,
                    "healthy": n.healthy, "penalty_ms": n.penalty_ms}
        out = {
            "scenario": self.name,
            "seed": self.seed,
            "central": node(self.central),
            "regions": [node(n) for n in self.regions],
            "devices": [{"id": v.device_id, "lat": v.location.lat, "lon": v.location.lon, "home": v.home}
                        for v in self.devices],
            "latency": {"per_km": self.latency.per_km, "base": self.latency.base,
                        "jitter_sigma": self.latency.jitter_sigma},
            "workload": {"upload_interval_s": self.workload.upload_interval_s,
                         "schedule": [list(s) for s in self.workload.schedule]},
            "replication": {"interval_s": self.replication.interval_s},
            "partitions": [p.to_dict() for p in self.partitions],
            "routing": self.routing.value,
            "snapshot_interval_s": self.snapshot_interval_s,
        }
        if self.processing is not None:
            p = self.processing
            out["processing"] = {"policy": dict(vars(p.policy)), "initial_workers": p.initial_workers,
                                 "service_mean_s": p.service_mean_s, "service_dispersion": p.service_dispersion,
                                 "metrics_window_s": p.metrics_window_s}
        return out


def _partition_from_dict(p):
    dur = p.get("duration_s")
    part = Partition(str(p["node"]), float(p["start_s"]), None if dur is None else float(dur))
    if part.start_s < 0 or (part.duration_s is not None and part.duration_s < 0):
        raise ValueError("partition start and duration must be >= 0")
    return part


def _expand_devices(spec, regions, seed):
    from .synth import _rng, scatter_devices

    raw = scatter_devices(regions, int(spec["count"]), float(spec.get("spread_km", 500.0)), _rng(seed, 7))
    return [Device(v["id"], GeoPoint.checked(v["lat"], v["lon"]), v["home"]) for v in raw]


def load_scenario(name_or_path) -> FleetScenario:
    """A built-in scenario name (e.g. ``"paper-latency"``) or a JSON file path."""
    import json
    from pathlib import Path

    from .synth import load_named_scenario

    p = Path(str(name_or_path))
    if p.suffix == ".json" or p.exists():
        return FleetScenario.from_dict(json.loads(p.read_text(encoding="utf-8")))
    return FleetScenario.from_dict(load_named_scenario(str(name_or_path)))


def inject_partition(scenario: FleetScenario, node_id, start_s, duration_s) -> FleetScenario:
    """Cut the ``node -> central`` replication link during ``[start, start + duration)``.

    Overlapping or touching partitions on the same link merge; a zero
    duration is a no-op. ``duration_s=None`` never heals.
    """
    if start_s < 0 or (duration_s is not None and duration_s < 0):
        raise ValueError("partition start and duration must be >= 0")
    if duration_s == 0:
        return scenario
    new = Partition(node_id, float(start_s), None if duration_s is None else float(duration_s))
    same = sorted([p for p in scenario.partitions if p.node_id == node_id] + [new], key=lambda p: p.start_s)
    merged = [same[0]]
    for p in same[1:]:
        last = merged[-1]
        if p.start_s <= last.end_s:
            end = max(last.end_s, p.end_s)
            merged[-1] = Partition(node_id, last.start_s, None if end == math.inf else end - last.start_s)
        else:
            merged.append(p)
    others = [p for p in scenario.partitions if p.node_id != node_id]
    return replace(scenario, partitions=tuple(sorted(others + merged, key=lambda p: (p.node_id, p.start_s))))


# --------------------------------------------------------------------------
# simulator
# --------------------------------------------------------------------------

# event kinds
_UPLOAD, _SUBMIT, _ARRIVE, _DONE, _REPL_TICK, _REPL_APPLY, _PROC_DONE, _SCALE_TICK, _SNAPSHOT = range(9)


def _percentiles(values, qs=(50, 95, 99)):
    if len(values) == 0:
        return {f"p{q}": None for q in qs} | {"n": 0}
    a = np.asarray(values, dtype=float)
    out = {f"p{q}": float(np.percentile(a, q)) for q in qs}
    out["mean"] = float(a.mean())
    out["max"] = float(a.max())
    out["n"] = int(a.size)
    return out


@dataclass
class _Batch:
    node_id: str
    ids: tuple
    sent_us: int


class FleetSimulator:
    """Event loop for one ``(scenario, seed)``.

    Besides the scenario's Poisson workload, callers can push uploads with
    :meth:`submit` (the device agents do this through
    :meth:`upload_handle`).
    """

    def __init__(self, scenario: FleetScenario, seed: int = 0, trace: bool = False):
        self.scenario = scenario
        self.seed = int(seed)
        streams = np.random.SeedSequence(self.seed).spawn(5)
        self._rng_arrival, self._rng_route, self._rng_repl, self._rng_proc, self._rng_device = (
            np.random.default_rng(s) for s in streams)
        self.trace_enabled = trace
        self.trace = []
        self.now = 0
        self._heap = []
        self._seq = 0

        self.nodes = {n.node_id: replace(n, store={}) for n in scenario.nodes()}
        self.central_id = scenario.central.node_id
        self.central_store = self.nodes[self.central_id].store
        self.devices = {d.device_id: d for d in scenario.devices}
        self._device_order = [d.device_id for d in scenario.devices]
        self._cand_cache = {}
        self._node_free_at = {nid: 0 for nid in self.nodes}
        self._acked = {nid: set() for nid in self.nodes}
        self._in_transit = {}  # clip id -> count of batches carrying it
        self._partitions = {}
        for p in scenario.partitions:
            self._partitions.setdefault(p.node_id, []).append(
                (to_us(p.start_s), math.inf if p.duration_s is None else to_us(p.end_s)))

        self.counts = dict(uploads_sent=0, received=0, ingested=0, duplicates_deduped=0,
                           deferred_batches=0, dropped_batches=0, batches_applied=0)
        self._seen = set()
        self._clip_seq = 0
        self.latencies_ms = []
        self.repl_lag_s = []
        self.snapshots = []
        self.conservation_ok = True
        self._ack_callbacks = {}

        self._proc = None
        if scenario.processing is not None:
            self._init_processing(scenario.processing)

        self._arrival_t = 0.0
        self._uploads_until = -1.0
        self._in_flight = {}  # node id -> ids in unapplied batches
        self._unrep = set()  # ids held by some node but not yet central
        self._horizon_us = 0
        self._draining = False
        self._drain_limit_us = 0
        self._cut_forever = {nid for nid, v in self._partitions.items() if any(b == math.inf for _, b in v)}

    # -- event plumbing ------------------------------------------------

    def _push(self, t_us, kind, payload=None):
        heapq.heappush(self._heap, (int(t_us), self._seq, kind, payload))
        self._seq += 1

    def _record(self, **ev):
        if self.trace_enabled:
            self.trace.append(ev)

    # -- uploads -------------------------------------------------------

    def _rate(self, mult):
        return len(self.devices) * mult / self.scenario.workload.upload_interval_s

    def _next_arrival(self, t):
        """Exact inversion of the piecewise-constant aggregate Poisson rate."""
        e = self._rng_arrival.exponential()
        sched = self.scenario.workload.schedule
        i = max(k for k, (s, _) in enumerate(sched) if s <= t)
        while True:
            end = sched[i + 1][0] if i + 1 < len(sched) else math.inf
            r = self._rate(sched[i][1])
            if r > 0 and r * (end - t) >= e:
                return t + e / r
            if end == math.inf:
                return None
            if r > 0:
                e -= r * (end - t)
            t, i = end, i + 1

    def _schedule_next_upload(self):
        t = self._next_arrival(self._arrival_t)
        if t is None or t > self._uploads_until:
            return
        self._arrival_t = t
        self._push(to_us(t), _UPLOAD)

    def submit(self, device_id, clip_id, at_s=None, on_ack: Callable | None = None, meta=None):
        """Queue one upload of ``clip_id`` from ``device_id`` (default: now)."""
        if device_id not in self.devices:
            raise KeyError(f"unknown device {device_id!r}")
        t = self.now if at_s is None else max(self.now, to_us(at_s))
        if on_ack is not None:
            self._ack_callbacks.setdefault(clip_id, []).append(on_ack)
        self._push(t, _SUBMIT, (device_id, clip_id, meta))

    def upload_handle(self):
        return UploadHandle(self)

    def _candidates(self, device):
        c = self._cand_cache.get(device.device_id)
        if c is None:
            c = geo_candidates(device.location, list(self.nodes.values()))
            self._cand_cache[device.device_id] = c
        return c

    def _send(self, device_id, clip_id):
        dev = self.devices[device_id]
        mode = self.scenario.routing
        cands = None if mode is RoutingMode.CENTRALIZED else self._candidates(dev)
        dec = route(dev.location, list(self.nodes.values()), self.scenario.latency, mode, self._rng_route,
                    self.central_id, cands)
        self.counts["uploads_sent"] += 1
        self._record(kind="route", t_us=self.now, device=device_id, clip=clip_id, node=dec.node_id,
                     latency_ms=dec.latency_ms, probes=[list(p) for p in dec.probes])
        self._push(self.now + to_us(dec.latency_ms / 1000.0), _ARRIVE, (dec.node_id, clip_id, self.now))

    def _on_upload(self, _):
        idx = int(self._rng_arrival.integers(len(self._device_order)))
        self._clip_seq += 1
        self._send(self._device_order[idx], f"clip-{self._clip_seq:08d}")
        self._schedule_next_upload()

    def _on_submit(self, payload):
        device_id, clip_id, _meta = payload
        self._send(device_id, clip_id)

    def _on_arrive(self, payload):
        node_id, clip_id, sent_us = payload
        node = self.nodes[node_id]
        start = max(self.now, self._node_free_at[node_id])
        done = start + node.service_us
        self._node_free_at[node_id] = done
        self._push(done, _DONE, (node_id, clip_id, sent_us))

    def _on_done(self, payload):
        node_id, clip_id, sent_us = payload
        node = self.nodes[node_id]
        self.counts["received"] += 1
        self.latencies_ms.append((self.now - sent_us) / 1000.0)
        if clip_id in node.store:
            self.counts["duplicates_deduped"] += 1
        else:
            node.store[clip_id] = self.now
            if node_id == self.central_id:
                self._acked[node_id].add(clip_id)
                self._unrep.discard(clip_id)
            elif clip_id not in self.central_store:
                self._unrep.add(clip_id)
        if clip_id not in self._seen:
            self._seen.add(clip_id)
            self.counts["ingested"] += 1
            if self._proc is not None:
                self._proc_enqueue(clip_id)
        elif node_id != self.central_id and clip_id in self.central_store:
            # re-delivery of a clip central already holds: nothing to ship
            self._acked[node_id].add(clip_id)
        self._record(kind="ingest", t_us=self.now, node=node_id, clip=clip_id)
        for cb in self._ack_callbacks.pop(clip_id, []):
            cb(clip_id, node_id, self.now / US)

    # -- replication ---------------------------------------------------

    def partitioned(self, node_id, t_us) -> bool:
        return any(a <= t_us < b for a, b in self._partitions.get(node_id, ()))

    def _on_repl_tick(self, k):
        interval = to_us(self.scenario.replication.interval_s)
        for nid in sorted(self.nodes):
            if nid == self.central_id:
                continue
            self._replicate_node(nid)
        if self._ticks_wanted(k + 1):
            self._push((k + 1) * interval, _REPL_TICK, k + 1)

    def _replicate_node(self, nid):
        node = self.nodes[nid]
        pending = tuple(c for c in node.store if c not in self._acked[nid] and c not in self._in_flight_for(nid))
        if not pending:
            return []
        if self.partitioned(nid, self.now):
            self.counts["deferred_batches"] += 1
            self._record(kind="defer", t_us=self.now, node=nid, n=len(pending))
            return []
        delay = self.scenario.latency.sample(node.location, self.scenario.central.location, self._rng_repl)
        batch = _Batch(nid, pending, self.now)
        self._in_flight.setdefault(nid, set()).update(pending)
        for c in pending:
            self._in_transit[c] = self._in_transit.get(c, 0) + 1
        self._push(self.now + to_us(delay / 1000.0), _REPL_APPLY, batch)
        self._record(kind="ship", t_us=self.now, node=nid, n=len(pending))
        return list(pending)

    def _in_flight_for(self, nid):
        return self._in_flight.get(nid, ())

    def _on_repl_apply(self, batch: _Batch):
        nid = batch.node_id
        self._in_flight[nid].difference_update(batch.ids)
        for c in batch.ids:
            self._in_transit[c] -= 1
            if not self._in_transit[c]:
                del self._in_transit[c]
        if self.partitioned(nid, self.now):
            self.counts["dropped_batches"] += 1
            self._record(kind="drop", t_us=self.now, node=nid, n=len(batch.ids))
            return
        node = self.nodes[nid]
        for c in batch.ids:
            if c in self.central_store:
                self.counts["duplicates_deduped"] += 1
            else:
                self.central_store[c] = self.now
                self._unrep.discard(c)
                self.repl_lag_s.append((self.now - node.store[c]) / US)
            self._acked[nid].add(c)
        self.counts["batches_applied"] += 1
        self._record(kind="apply", t_us=self.now, node=nid, n=len(batch.ids))

    def _unreplicated(self):
        return self._unrep

    def _ticks_wanted(self, k):
        interval = to_us(self.scenario.replication.interval_s)
        t = k * interval
        if t <= self._horizon_us:
            return True
        if not self._draining:
            return False
        if t > self._drain_limit_us:
            return False
        # keep ticking while something can still move
        return any(self._can_move(c) for c in self._unreplicated()) or self._pending_non_tick()

    def _can_move(self, clip_id):
        return any(clip_id in n.store for nid, n in self.nodes.items()
                   if nid != self.central_id and nid not in self._cut_forever)

    def _pending_non_tick(self):
        return any(kind not in (_REPL_TICK, _SNAPSHOT, _SCALE_TICK) for _, _, kind, _ in self._heap)

    # -- processing tier -------------------------------------------------

    def _init_processing(self, cfg: ProcessingConfig):
        pol = cfg.policy
        self._proc = dict(
            cfg=cfg,
            pool=WorkerPool(ResourceClass.CPU, cfg.initial_workers, pol.min_workers, pol.max_workers),
            busy=0, queue=[], qhead=0, done=[],  # done: (t_us, latency_ms)
            last_action=None, decisions=[], workers=[[0.0, cfg.initial_workers]], p95=[],
        )

    def _proc_service_us(self):
        cfg = self._proc["cfg"]
        s = cfg.service_dispersion
        mult = math.exp(s * self._rng_proc.standard_normal() - 0.5 * s * s) if s > 0 else 1.0
        return max(1, to_us(cfg.service_mean_s * mult))

    def _proc_enqueue(self, clip_id):
        p = self._proc
        p["queue"].append((clip_id, self.now))
        self._proc_dispatch()

    def _proc_dispatch(self):
        p = self._proc
        while p["busy"] < p["pool"].current_workers and p["qhead"] < len(p["queue"]):
            clip_id, t_in = p["queue"][p["qhead"]]
            p["qhead"] += 1
            p["busy"] += 1
            self._push(self.now + self._proc_service_us(), _PROC_DONE, (clip_id, t_in))
        if p["qhead"] > 4096 and p["qhead"] * 2 > len(p["queue"]):
            del p["queue"][: p["qhead"]]
            p["qhead"] = 0

    def _on_proc_done(self, payload):
        _clip, t_in = payload
        p = self._proc
        p["busy"] -= 1
        p["done"].append((self.now, (self.now - t_in) / 1000.0))
        self._proc_dispatch()

    def stage_metrics(self) -> StageMetrics:
        p = self._proc
        window = to_us(p["cfg"].metrics_window_s)
        lo = self.now - window
        done = p["done"]
        # drop samples older than the window
        k = 0
        while k < len(done) and done[k][0] < lo:
            k += 1
        if k:
            del done[:k]
        p95 = float(np.percentile([x for _, x in done], 95)) if done else 0.0
        return StageMetrics(len(p["queue"]) - p["qhead"], p95)

    def _on_scale_tick(self, _):
        p = self._proc
        pol = p["cfg"].policy
        m = self.stage_metrics()
        now_s = self.now / US
        dec = autoscale_tick(pol, m, p["pool"], now_s, p["last_action"])
        p["p95"].append([now_s, m.p95_ms, m.queue_depth])
        if dec.action is not Action.HOLD:
            p["pool"].current_workers = dec.target
            p["last_action"] = now_s
            p["decisions"].append([now_s, dec.action.value, dec.n, dec.target])
            p["workers"].append([now_s, dec.target])
            self._proc_dispatch()
        nxt = self.now + to_us(pol.evaluate_every_s)
        if nxt <= self._horizon_us:
            self._push(nxt, _SCALE_TICK)

    # -- snapshots ------------------------------------------------------

    def snapshot(self):
        replicated = len(self.central_store)
        in_transit = sum(1 for c in self._in_transit if c not in self.central_store)
        resident = sum(1 for c in self._unreplicated() if c not in self._in_transit)
        ok = self.counts["ingested"] == replicated + in_transit + resident
        union = set(self.central_store)
        for n in self.nodes.values():
            union.update(n.store)
        ok = ok and union == self._seen
        snap = {"t_s": self.now / US, "ingested": self.counts["ingested"], "replicated": replicated,
                "in_transit": in_transit, "resident": resident, "conserved": ok}
        if self._proc is not None:
            snap["workers"] = self._proc["pool"].current_workers
        return snap

    def _on_snapshot(self, _):
        snap = self.snapshot()
        self.snapshots.append(snap)
        self.conservation_ok &= snap["conserved"]
        nxt = self.now + to_us(self.scenario.snapshot_interval_s)
        if nxt <= self._horizon_us:
            self._push(nxt, _SNAPSHOT)

    # -- driver ---------------------------------------------------------

    _handlers = {
        _UPLOAD: _on_upload, _SUBMIT: _on_submit, _ARRIVE: _on_arrive, _DONE: _on_done,
        _REPL_TICK: _on_repl_tick, _REPL_APPLY: _on_repl_apply, _PROC_DONE: _on_proc_done,
        _SCALE_TICK: _on_scale_tick, _SNAPSHOT: _on_snapshot,
    }

    def run(self, duration_s, drain=False, generate=True):
        """Simulate ``[0, duration_s]``; with ``drain`` keep replicating until quiescent.

        Draining stops generating uploads and runs until every clip that can
        reach central has done so, plus one replication interval.
        """
        self._horizon_us = to_us(duration_s)
        self._draining = False
        interval = to_us(self.scenario.replication.interval_s)
        last_finite = max([b for v in self._partitions.values() for _, b in v if b != math.inf] + [0])
        self._drain_limit_us = max(self._horizon_us, last_finite) + 4 * interval + 1000 * US
        self._uploads_until = float(duration_s) if generate else -1.0
        if generate:
            self._schedule_next_upload()
        self._push(interval, _REPL_TICK, 1)
        if self._proc is not None:
            self._push(to_us(self._proc["cfg"].policy.evaluate_every_s), _SCALE_TICK)
        self._push(to_us(self.scenario.snapshot_interval_s), _SNAPSHOT)
        self._loop(self._horizon_us)
        if drain:
            self._draining = True
            pending_tick = any(kind == _REPL_TICK for _, _, kind, _ in self._heap)
            if not pending_tick:
                k = self.now // interval + 1
                self._push(k * interval, _REPL_TICK, k)
            self._loop(self._drain_limit_us, stop_when_quiet=True)
        final = self.snapshot()
        self.snapshots.append(final)
        self.conservation_ok &= final["conserved"]
        return self.report(duration_s)

    def _loop(self, until_us, stop_when_quiet=False):
        heap = self._heap
        handlers = self._handlers
        while heap and heap[0][0] <= until_us:
            t, _, kind, payload = heapq.heappop(heap)
            self.now = t
            handlers[kind](self, payload)
            if stop_when_quiet and kind == _REPL_TICK and not any(k == _REPL_TICK for _, _, k, _ in heap):
                break

    def quiescent_consistent(self) -> bool:
        union = set()
        for nid, n in self.nodes.items():
            union.update(n.store)
        return union == set(self.central_store)

    def report(self, duration_s) -> dict:
        residue = sorted(self._unreplicated())
        counts = dict(self.counts)
        counts["replicated"] = len(self.central_store)
        counts["in_transit"] = sum(1 for c in self._in_transit if c not in self.central_store)
        counts["resident"] = len([c for c in residue if c not in self._in_transit])
        rep = {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "duration_s": float(duration_s),
            "end_s": self.now / US,
            "routing": self.scenario.routing.value,
            "ingest_latency_ms": {self.scenario.routing.value: _percentiles(self.latencies_ms)},
            "replication_lag_s": _percentiles(self.repl_lag_s),
            "counts": counts,
            "conservation_ok": bool(self.conservation_ok),
            "snapshots": self.snapshots,
            "unreplicated_residue": len(residue),
            "central_consistent": self.quiescent_consistent(),
        }
        if self._proc is not None:
            rep["processing"] = self._processing_report()
        return rep

    def _processing_report(self):
        p = self._proc
        pol = p["cfg"].policy
        spikes = []
        for onset, end in self.scenario.workload.spikes():
            ticks = [(t, v) for t, v, _ in p["p95"] if onset <= t < end]
            last_bad = max((t for t, v in ticks if v > pol.latency_slo_ms), default=None)
            if last_bad is None:
                rec = 0.0
            else:
                after = [t for t, _ in ticks if t > last_bad]
                rec = after[0] - onset if after else None
            spikes.append({"onset_s": onset, "end_s": None if end == math.inf else end, "recovery_s": rec})
        recs = [s["recovery_s"] for s in spikes]
        worker_counts = [w for _, w in p["workers"]]
        return {
            "worker_series": p["workers"],
            "decisions": p["decisions"],
            "metrics_series": p["p95"],
            "spikes": spikes,
            "spike_recovery_s": (None if any(r is None for r in recs) else max(recs)) if recs else None,
            "min_workers_seen": min(worker_counts),
            "max_workers_seen": max(worker_counts),
            "queue_depth_end": len(p["queue"]) - p["qhead"],
        }


class UploadHandle:
    """What a device agent sees of the fleet: submit uploads, get acks."""

    def __init__(self, sim: FleetSimulator):
        self._sim = sim

    def upload(self, device_id, clip_id, meta=None, on_ack=None, at_s=None):
        self._sim.submit(device_id, clip_id, at_s=at_s, on_ack=on_ack, meta=meta)

    def central_ids(self):
        return set(self._sim.central_store)


def run(scenario: FleetScenario, duration_s, seed=0, drain=False, routing=None, trace=False) -> dict:
    if routing is not None:
        scenario = scenario.with_routing(routing)
    return FleetSimulator(scenario, seed, trace=trace).run(duration_s, drain=drain)


def compare_routing(scenario: FleetScenario, duration_s, seed=0, modes=tuple(RoutingMode)) -> dict:
    """Ingest-latency percentiles per routing mode under the same seed."""
    out = {}
    for m in modes:
        rep = run(scenario, duration_s, seed, routing=m)
        out.update(rep["ingest_latency_ms"])
    return out
