"""Declarative DAG workflow engine with versioned operators and hot swap.

Operators are registered under ``(name, semver)``; a pipeline spec wires
stages (operator + optional pinned version) into a DAG. The engine runs on a
simulated clock: an operator's implementation executes when an item is
dispatched to a worker and the item completes after a service time drawn from
the operator's cost model. CPU and GPU stages are served by separate worker
pools, round-robin across stages within a pool.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import logging
import math
import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DuplicateVersion, UnknownOperator, UnknownVersion

logger = logging.getLogger(__name__)

US = 1_000_000


class ResourceClass(str, Enum):
    CPU = "CPU"
    GPU = "GPU"


@dataclass
class WorkerPool:
    resource_class: ResourceClass
    current_workers: int
    min_workers: int
    max_workers: int

    def __post_init__(self):
        self.resource_class = ResourceClass(self.resource_class)
        if not self.min_workers <= self.current_workers <= self.max_workers:
            raise ValueError("worker pool requires min <= current <= max")


# --------------------------------------------------------------------------
# operators and registry
# --------------------------------------------------------------------------

_SEMVER = re.compile(r"^(\d+)(?:\.(\d+))?(?:\.(\d+))?(?:-([0-9A-Za-z.-]+))?$")


def semver_key(version: str):
    """Sort key for ``MAJOR[.MINOR[.PATCH]][-PRERELEASE]``; a pre-release sorts below its release."""
    m = _SEMVER.match(str(version))
    if not m:
        raise ValueError(f"not a semantic version: {version!r}")
    major, minor, patch, pre = m.groups()
    core = (int(major), int(minor or 0), int(patch or 0))
    if pre is None:
        return core + (1, ())
    ids = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in pre.split("."))
    return core + (0, ids)


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    version: str
    resource_class: ResourceClass
    input_kind: str
    output_kind: str
    cost_mean_s: float = 0.1
    cost_dispersion: float = 0.0  # log-normal sigma, mean preserved

    def __post_init__(self):
        object.__setattr__(self, "resource_class", ResourceClass(self.resource_class))
        semver_key(self.version)
        if not self.name or not self.input_kind or not self.output_kind:
            raise ValueError("operator name and kinds must be non-empty")
        if self.cost_mean_s < 0 or self.cost_dispersion < 0:
            raise ValueError("cost model parameters must be >= 0")


class OperatorRegistry:
    def __init__(self):
        self._ops: dict[str, dict[str, tuple[OperatorSpec, Callable]]] = {}

    def register(self, spec: OperatorSpec, impl: Callable):
        versions = self._ops.setdefault(spec.name, {})
        if spec.version in versions:
            raise DuplicateVersion(f"{spec.name}@{spec.version} already registered")
        versions[spec.version] = (spec, impl)

    def __contains__(self, name):
        return name in self._ops

    def names(self):
        return sorted(self._ops)

    def versions(self, name):
        if name not in self._ops:
            raise UnknownOperator(name)
        return sorted(self._ops[name], key=semver_key)

    def highest(self, name) -> str:
        return self.versions(name)[-1]

    def get(self, name, version=None):
        """``(spec, impl)`` for ``name`` at ``version`` (highest when ``None``)."""
        if name not in self._ops:
            raise UnknownOperator(name)
        version = self.highest(name) if version is None else version
        try:
            return self._ops[name][version]
        except KeyError:
            raise UnknownVersion(f"{name}@{version}") from None


def register_operator(registry: OperatorRegistry, spec: OperatorSpec, impl: Callable):
    registry.register(spec, impl)


# --------------------------------------------------------------------------
# pipeline spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    id: str
    op: str
    version: str | None = None


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple
    edges: tuple
    retries: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(s if isinstance(s, StageSpec) else StageSpec(**s)
                                                 for s in self.stages))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    @classmethod
    def from_dict(cls, d):
        stages = [StageSpec(str(s["id"]), str(s["op"]), s.get("version")) for s in d["stages"]]
        return cls(tuple(stages), tuple((str(a), str(b)) for a, b in d.get("edges", [])), int(d.get("retries", 0)))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def linear(cls, ops, prefix="s"):
        stages = [StageSpec(f"{prefix}{i}", op) for i, op in enumerate(ops)]
        return cls(tuple(stages), tuple((a.id, b.id) for a, b in zip(stages, stages[1:])))

    def to_dict(self):
        stages = []
        for s in self.stages:
            d = {"id": s.id, "op": s.op}
            if s.version is not None:
                d["version"] = s.version
            stages.append(d)
        out = {"stages": stages, "edges": [list(e) for e in self.edges]}
        if self.retries:
            out["retries"] = self.retries
        return out

    def stage(self, sid) -> StageSpec:
        for s in self.stages:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def upstream(self, sid):
        return [a for a, b in self.edges if b == sid]

    def downstream(self, sid):
        return [b for a, b in self.edges if a == sid]

    def sources(self):
        return [s.id for s in self.stages if not self.upstream(s.id)]

    def sinks(self):
        return [s.id for s in self.stages if not self.downstream(s.id)]


@dataclass(frozen=True)
class SpecError:
    code: str  # CYCLE, DANGLING_EDGE, DUPLICATE_STAGE, UNKNOWN_OPERATOR, UNKNOWN_VERSION, KIND_MISMATCH, NO_SOURCE, NO_SINK, EMPTY
    message: str
    stages: tuple = ()

    def to_dict(self):
        return {"code": self.code, "message": self.message, "stages": list(self.stages)}


def _cycles(ids, edges):
    """Stage groups lying on a cycle (strongly connected, or a self-loop)."""
    index = {s: i for i, s in enumerate(ids)}
    if not edges:
        return []
    rows = [index[a] for a, _ in edges]
    cols = [index[b] for _, b in edges]
    g = csr_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(ids), len(ids)))
    _, labels = connected_components(g, directed=True, connection="strong")
    groups = {}
    for s, lab in zip(ids, labels):
        groups.setdefault(int(lab), []).append(s)
    loops = {a for a, b in edges if a == b}
    return [tuple(sorted(m)) for m in groups.values() if len(m) > 1 or m[0] in loops]


def validate_spec(spec: PipelineSpec, registry: OperatorRegistry) -> list:
    """Every structural problem of ``spec``; an empty list means executable. Never raises."""
    errors = []
    ids = [s.id for s in spec.stages]
    if not ids:
        return [SpecError("EMPTY", "pipeline has no stages")]
    dupes = sorted({s for s in ids if ids.count(s) > 1})
    if dupes:
        errors.append(SpecError("DUPLICATE_STAGE", f"duplicate stage ids {dupes}", tuple(dupes)))
    known = set(ids)
    good_edges = []
    for a, b in spec.edges:
        missing = [x for x in (a, b) if x not in known]
        if missing:
            errors.append(SpecError("DANGLING_EDGE", f"edge {a}->{b} references unknown stage(s) {missing}", (a, b)))
        else:
            good_edges.append((a, b))
    uniq = list(dict.fromkeys(ids))
    for group in _cycles(uniq, list(dict.fromkeys(good_edges))):
        errors.append(SpecError("CYCLE", f"cycle through {list(group)}", group))

    resolved = {}
    for s in spec.stages:
        try:
            resolved[s.id] = registry.get(s.op, s.version)[0]
        except UnknownVersion:
            errors.append(SpecError("UNKNOWN_VERSION", f"stage {s.id}: {s.op}@{s.version} not registered", (s.id,)))
        except UnknownOperator:
            errors.append(SpecError("UNKNOWN_OPERATOR", f"stage {s.id}: operator {s.op!r} not registered", (s.id,)))
    for a, b in good_edges:
        if a in resolved and b in resolved and resolved[a].output_kind != resolved[b].input_kind:
            errors.append(SpecError("KIND_MISMATCH", f"{a} emits {resolved[a].output_kind!r} but {b} "
                                    f"expects {resolved[b].input_kind!r}", (a, b)))
    targets = {b for _, b in good_edges}
    origins = {a for a, _ in good_edges}
    if not [s for s in uniq if s not in targets]:
        errors.append(SpecError("NO_SOURCE", "no stage without inputs"))
    if not [s for s in uniq if s not in origins]:
        errors.append(SpecError("NO_SINK", "no stage without outputs"))
    return errors


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

class LineageEntry(NamedTuple):
    op: str
    version: str
    stage_id: str
    dispatched_s: float


@dataclass(frozen=True, eq=False)
class ClipArtifact:
    clip_id: str
    kind: str
    payload: Any = None
    lineage: tuple = ()

    def derive(self, kind=None, payload=None, clip_id=None) -> "ClipArtifact":
        """Copy with a new kind/payload/id; lineage is appended by the engine."""
        return replace(self, kind=kind or self.kind, clip_id=clip_id or self.clip_id,
                       payload=self.payload if payload is None else payload)

    def versions(self, op):
        return [e.version for e in self.lineage if e.op == op]


class HardNegative(NamedTuple):
    """Operator result meaning "send to the hard-negative pool"."""

    artifact: ClipArtifact
    verdict: Any


@dataclass
class OperatorContext:
    stage_id: str
    op: str
    version: str
    now_s: float
    rng: np.random.Generator
    params: dict


@dataclass(frozen=True)
class SwapReceipt:
    operator: str
    old_version: str
    new_version: str
    swap_time: float
    in_flight_count: int
    noop: bool

    def to_dict(self):
        return dict(vars(self))


def _item_seed(seed, clip_id):
    return int.from_bytes(hashlib.blake2b(f"{seed}:{clip_id}".encode(), digest_size=8).digest(), "big")


def _pct(values):
    if not values:
        return {"p50": None, "p95": None, "p99": None, "n": 0}
    a = np.asarray(values)
    return {"p50": float(np.percentile(a, 50)), "p95": float(np.percentile(a, 95)),
            "p99": float(np.percentile(a, 99)), "n": int(a.size)}


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------

_HOOK, _ARRIVE, _COMPLETE = 0, 1, 2  # hooks win ties so a swap at t governs dispatches at t


@dataclass
class _Item:
    artifact: ClipArtifact
    enqueued_us: int
    attempts: int = 0


@dataclass
class RunResult:
    outputs: list
    hard_negatives: list
    errors: list
    report: dict
    pool: Any = None
    trace: list = field(default_factory=list)


class Engine:
    """Single scheduler owning every queue; all state changes are serialized on a simulated clock."""

    def __init__(self, registry: OperatorRegistry, cpu_workers=4, gpu_workers=2, seed=0, tick_s=1.0,
                 params=None, hard_negative_pool=None):
        from .qc import HardNegativePool

        self.registry = registry
        self.pools = {ResourceClass.CPU: WorkerPool(ResourceClass.CPU, cpu_workers, 0, max(cpu_workers, 0)),
                      ResourceClass.GPU: WorkerPool(ResourceClass.GPU, gpu_workers, 0, max(gpu_workers, 0))}
        self.seed = int(seed)
        self.tick_s = float(tick_s)
        self.params = dict(params or {})
        self.pool = hard_negative_pool if hard_negative_pool is not None else HardNegativePool()
        self.active: dict[str, str] = {}  # hot-swapped versions for unpinned stages
        self.receipts: list[SwapReceipt] = []
        self.now_us = 0
        self.running = False
        self._hooks = []

    @property
    def now_s(self):
        return self.now_us / US

    def at(self, t_s, fn: Callable[["Engine"], Any]):
        """Call ``fn(engine)`` at simulated time ``t_s`` of the next run."""
        self._hooks.append((int(round(t_s * US)), fn))

    def resolve(self, stage: StageSpec) -> str:
        if stage.version is not None:
            return stage.version
        return self.active.get(stage.op) or self.registry.highest(stage.op)

    # -- run ---------------------------------------------------------------

    def run(self, spec: PipelineSpec, inputs, arrivals_s=None) -> RunResult:
        errs = validate_spec(spec, self.registry)
        if errs:
            raise ValueError("invalid pipeline spec: " + "; ".join(e.message for e in errs))
        for s in spec.stages:
            rc = self.registry.get(s.op, s.version)[0].resource_class
            if self.pools[rc].current_workers < 1:
                raise ValueError(f"stage {s.id} needs a {rc.value} worker but the pool is empty")
        self.spec = spec
        self._svc_rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
        self._heap, self._seq = [], 0
        self.now_us = 0
        self.running = True
        stages = [s.id for s in spec.stages]
        self._queues = {s: [] for s in stages}
        self._qhead = {s: 0 for s in stages}
        self._cls = {s.id: self.registry.get(s.op, s.version)[0].resource_class for s in spec.stages}
        self._rr = {rc: 0 for rc in ResourceClass}
        self._by_class = {rc: [s for s in stages if self._cls[s] is rc] for rc in ResourceClass}
        self._busy = {rc: {} for rc in ResourceClass}  # worker index -> (stage, op) in service
        self._busy_time = {rc: 0 for rc in ResourceClass}
        self._joins = {}
        self._down = {s: spec.downstream(s) for s in stages}
        self._up = {s: spec.upstream(s) for s in stages}
        self._sinks = set(spec.sinks())
        self.trace = []
        self.outputs, self.hard_negatives, self.errors = [], [], []
        self.counts = dict(inputs=0, outputs=0, hard_negatives=0, errors=0, created=0, merged=0)
        self._stage_lat = {s: [] for s in stages}
        self._dispatched = {s: 0 for s in stages}
        self._versions = {s: {} for s in stages}
        self._series_t, self._series = [], {s: [] for s in stages}
        self._next_sample = 0
        self._work_conserving = True
        self.receipts = []

        inputs = list(inputs)
        if arrivals_s is None:
            arrivals_s = [0.0] * len(inputs)
        for art, t in zip(inputs, arrivals_s):
            self._push(int(round(t * US)), _ARRIVE, art)
        for t, fn in self._hooks:
            self._push(t, _HOOK, fn)

        while self._heap:
            t, _, _, kind, payload = heapq.heappop(self._heap)
            self._sample_until(t)
            self.now_us = t
            if kind == _HOOK:
                payload(self)
            elif kind == _ARRIVE:
                self.counts["inputs"] += 1
                srcs = spec.sources()
                self.counts["created"] += len(srcs) - 1
                for s in srcs:
                    self._enqueue(s, payload)
            else:
                self._complete(*payload)
            self._dispatch_all()
        self._sample_until(self.now_us, final=True)
        self.running = False
        report = self._report()
        return RunResult(self.outputs, self.hard_negatives, self.errors, report, self.pool, self.trace)

    def _push(self, t_us, kind, payload):
        heapq.heappush(self._heap, (int(t_us), kind if kind == _HOOK else 1, self._seq, kind, payload))
        self._seq += 1
        # heap entries: (time, priority, seq, kind, payload)

    def _enqueue(self, sid, art, attempts=0):
        self._queues[sid].append(_Item(art, self.now_us, attempts))

    def _depth(self, sid):
        return len(self._queues[sid]) - self._qhead[sid]

    def _sample_until(self, t_us, final=False):
        tick = int(round(self.tick_s * US))
        while self._next_sample <= t_us:
            self._take_sample(self._next_sample / US)
            self._next_sample += tick
        if final:
            self._take_sample(t_us / US)

    def _take_sample(self, t_s):
        self._series_t.append(t_s)
        for s in self._series:
            self._series[s].append(self._depth(s))
        for rc, pool in self.pools.items():
            idle = pool.current_workers - len(self._busy[rc])
            if idle > 0 and any(self._depth(s) for s in self._by_class[rc]):
                self._work_conserving = False

    def _dispatch_all(self):
        for rc in ResourceClass:
            self._dispatch(rc)

    def _dispatch(self, rc):
        stages = self._by_class[rc]
        if not stages:
            return
        pool = self.pools[rc]
        busy = self._busy[rc]
        n = len(stages)
        while len(busy) < pool.current_workers:
            start = self._rr[rc]
            pick = None
            for k in range(n):
                sid = stages[(start + k) % n]
                if self._depth(sid):
                    pick = (start + k) % n
                    break
            if pick is None:
                return
            self._rr[rc] = (pick + 1) % n
            sid = stages[pick]
            item = self._queues[sid][self._qhead[sid]]
            self._qhead[sid] += 1
            if self._qhead[sid] > 1024 and 2 * self._qhead[sid] > len(self._queues[sid]):
                del self._queues[sid][: self._qhead[sid]]
                self._qhead[sid] = 0
            worker = next(i for i in range(pool.current_workers) if i not in busy)
            self._start(rc, worker, sid, item)

    def _start(self, rc, worker, sid, item: _Item):
        stage = self.spec.stage(sid)
        version = self.resolve(stage)
        op_spec, impl = self.registry.get(stage.op, version)
        ctx = OperatorContext(sid, stage.op, version, self.now_s,
                              np.random.default_rng(_item_seed(self.seed, f"{sid}:{item.artifact.clip_id}")),
                              self.params)
        try:
            result, error = impl(item.artifact, ctx), None
        except Exception as exc:  # operator failures are data, not engine failures
            result, error = None, exc
        s = op_spec.cost_dispersion
        mult = math.exp(s * self._svc_rng.standard_normal() - 0.5 * s * s) if s > 0 else 1.0
        svc = max(1, int(round(op_spec.cost_mean_s * mult * US)))
        self._busy[rc][worker] = (sid, stage.op, version, stage.version is None)
        self._busy_time[rc] += svc
        self._dispatched[sid] += 1
        self._versions[sid][version] = self._versions[sid].get(version, 0) + 1
        self.trace.append({"t_us": self.now_us, "stage": sid, "pool": rc.value, "worker": worker,
                           "op": stage.op, "version": version, "resource_class": op_spec.resource_class.value,
                           "clip_id": item.artifact.clip_id})
        entry = LineageEntry(stage.op, version, sid, self.now_s)
        self._push(self.now_us + svc, _COMPLETE, (rc, worker, sid, item, entry, result, error))

    def _complete(self, rc, worker, sid, item, entry, result, error):
        del self._busy[rc][worker]
        self._stage_lat[sid].append((self.now_us - item.enqueued_us) / US)
        if error is not None:
            if item.attempts < self.spec.retries:
                self._enqueue(sid, item.artifact, item.attempts + 1)
                return
            self.counts["errors"] += 1
            self.errors.append({"clip_id": item.artifact.clip_id, "stage": sid, "op": entry.op,
                                "version": entry.version, "error": f"{type(error).__name__}: {error}",
                                "lineage": [list(e) for e in item.artifact.lineage + (entry,)]})
            return
        if isinstance(result, HardNegative):
            from .qc import route_failed

            art = replace(result.artifact, lineage=result.artifact.lineage + (entry,))
            route_failed(result.verdict, self.pool, now=self.now_s)
            self.counts["hard_negatives"] += 1
            self.hard_negatives.append(art)
            return
        outs = [result] if isinstance(result, ClipArtifact) else list(result or [])
        if not outs:
            self.counts["errors"] += 1
            self.errors.append({"clip_id": item.artifact.clip_id, "stage": sid, "op": entry.op,
                                "version": entry.version, "error": "operator produced no output",
                                "lineage": [list(e) for e in item.artifact.lineage + (entry,)]})
            return
        self.counts["created"] += len(outs) - 1
        for out in outs:
            out = replace(out, lineage=out.lineage + (entry,))
            if sid in self._sinks:
                self.counts["outputs"] += 1
                self.outputs.append(out)
                continue
            downs = self._down[sid]
            self.counts["created"] += len(downs) - 1
            for d in downs:
                if len(self._up[d]) > 1:
                    self._join(d, sid, out)
                else:
                    self._enqueue(d, out)

    def _join(self, d, from_sid, art):
        key = (d, art.clip_id)
        got = self._joins.setdefault(key, {})
        got[from_sid] = art
        if len(got) < len(self._up[d]):
            return
        del self._joins[key]
        parts = [got[u] for u in self._up[d]]
        lineage = list(parts[0].lineage)
        for p in parts[1:]:
            lineage.extend(e for e in p.lineage if e not in lineage)
        payload = parts[0].payload
        if all(isinstance(p.payload, dict) for p in parts):
            payload = {}
            for p in parts:
                payload.update(p.payload)
        self.counts["merged"] += len(parts) - 1
        self._enqueue(d, replace(parts[0], payload=payload, lineage=tuple(lineage)))

    def in_flight(self, op):
        return sum(1 for rc in ResourceClass for v in self._busy[rc].values() if v[1] == op)

    # -- report ------------------------------------------------------------

    def _report(self):
        c = self.counts
        conserved = c["inputs"] + c["created"] - c["merged"] == c["outputs"] + c["hard_negatives"] + c["errors"]
        makespan = self.now_s
        pools = {}
        for rc, pool in self.pools.items():
            cap = pool.current_workers * makespan
            pools[rc.value] = {"workers": pool.current_workers, "busy_s": self._busy_time[rc] / US,
                               "utilization": (self._busy_time[rc] / US / cap) if cap > 0 else 0.0}
        return {
            "seed": self.seed,
            "counts": dict(c),
            "conserved": conserved,
            "makespan_s": makespan,
            "throughput_per_s": c["outputs"] / makespan if makespan > 0 else None,
            "tick_s": self.tick_s,
            "queue_depth": {"t_s": self._series_t, **{s: v for s, v in self._series.items()}},
            "stages": {s: {"dispatched": self._dispatched[s], "versions": dict(sorted(self._versions[s].items())),
                           "latency_s": _pct(self._stage_lat[s])} for s in self._queues},
            "pools": pools,
            "swaps": [r.to_dict() for r in self.receipts],
            "work_conserving": self._work_conserving,
            "pending_joins": len(self._joins),
        }


def hot_swap(engine: Engine, name: str, new_version: str) -> SwapReceipt:
    """Point unpinned stages of ``name`` at ``new_version`` from now on.

    Items already in service finish under the version they were dispatched
    with; nothing is paused or drained.
    """
    spec, _ = engine.registry.get(name, new_version)  # raises UnknownOperator / UnknownVersion
    old = engine.active.get(name) or engine.registry.highest(name)
    old_spec = engine.registry.get(name, old)[0]
    if (spec.input_kind, spec.output_kind) != (old_spec.input_kind, old_spec.output_kind):
        raise ValueError(f"{name}@{new_version} changes the operator's kinds")
    in_flight = engine.in_flight(name) if engine.running else 0
    receipt = SwapReceipt(name, old, new_version, engine.now_s, in_flight, old == new_version)
    if not receipt.noop:
        engine.active[name] = new_version
    engine.receipts.append(receipt)
    logger.info("hot swap %s %s -> %s at t=%.6f (%d in flight)", name, old, new_version, engine.now_s, in_flight)
    return receipt


def run(engine: Engine, spec: PipelineSpec, inputs, arrivals_s=None) -> RunResult:
    return engine.run(spec, inputs, arrivals_s)


def run_wallclock(registry: OperatorRegistry, spec: PipelineSpec, inputs, seed=0, params=None) -> RunResult:
    """Run every item through the DAG in-process, timing operators on the wall clock.

    Same routing and terminal outcomes as :class:`Engine`, but latencies are
    real and therefore not reproducible.
    """
    eng = Engine(registry, cpu_workers=1, gpu_workers=1, seed=seed, params=params)
    timed = OperatorRegistry()
    for name in registry.names():
        for v in registry.versions(name):
            op_spec, impl = registry.get(name, v)

            def wrapped(art, ctx, _impl=impl):
                t0 = time.perf_counter()
                out = _impl(art, ctx)
                ctx.params.setdefault("_wall_s", []).append((ctx.stage_id, time.perf_counter() - t0))
                return out

            timed.register(replace(op_spec, cost_mean_s=0.0, cost_dispersion=0.0), wrapped)
    eng.registry = timed
    res = eng.run(spec, inputs)
    walls = eng.params.pop("_wall_s", [])
    res.report["wall_clock_s"] = {s.id: float(sum(w for sid, w in walls if sid == s.id)) for s in spec.stages}
    return res


# --------------------------------------------------------------------------
# built-in stub operators
# --------------------------------------------------------------------------

def _segment_stub(art, ctx):
    """Split at ``payload["markers"]`` (frame indices); no markers keeps one segment with the same id."""
    src = art.payload["source"]
    markers = sorted(int(m) for m in art.payload.get("markers", ()))
    if not markers:
        return art.derive(kind="segment", payload={**art.payload, "segment": 0})
    from .qc import AnnotatedClip

    bounds = [0, *markers, len(src.track)]
    out = []
    for k, (a, b) in enumerate(zip(bounds, bounds[1:])):
        idx = np.arange(a, b)
        sub = AnnotatedClip(f"{src.clip_id}/s{k}", src.track.subset(idx), src.trajectory, src.intrinsics,
                            src.observed[idx])
        out.append(ClipArtifact(sub.clip_id, "segment", {**art.payload, "source": sub, "segment": k}, art.lineage))
    return out


def _deidentify_stub(art, ctx):
    return art.derive(payload={**art.payload, "tags": tuple(art.payload.get("tags", ())) + ("deidentified",)})


def _traj_stub(art, ctx):
    return art.derive(kind="posed", payload={**art.payload, "trajectory": art.payload["source"].trajectory})


def _hand_stub(art, ctx):
    src = art.payload["source"]
    return art.derive(kind="annotated", payload={**art.payload, "track": src.track, "intrinsics": src.intrinsics,
                                                 "observed": src.observed})


def _qc_op(art, ctx):
    from .qc import AnnotatedClip, QCThresholds, check_clip, is_pass

    p = art.payload
    clip = AnnotatedClip(art.clip_id, p["track"], p["trajectory"], p["intrinsics"], p["observed"])
    verdict = check_clip(clip, ctx.params.get("qc_thresholds", QCThresholds()))
    if not is_pass(verdict):
        return HardNegative(art, verdict)
    return art.derive(kind="qc_passed", payload={**p, "verdict": verdict})


def _augment_stub(art, ctx):
    return art.derive(kind="augmented", payload={**art.payload, "tags": tuple(art.payload.get("tags", ())) + ("augmented",)})


BUILTIN_OPERATORS = (
    (OperatorSpec("segment_stub", "1.0.0", ResourceClass.GPU, "video", "segment", 2.0, 0.2), _segment_stub),
    (OperatorSpec("deidentify_stub", "1.0.0", ResourceClass.GPU, "segment", "segment", 0.5, 0.2), _deidentify_stub),
    (OperatorSpec("traj_stub", "1.0.0", ResourceClass.GPU, "segment", "posed", 3.0, 0.2), _traj_stub),
    (OperatorSpec("hand_stub", "1.0.0", ResourceClass.GPU, "posed", "annotated", 2.0, 0.2), _hand_stub),
    (OperatorSpec("qc_op", "1.0.0", ResourceClass.CPU, "annotated", "qc_passed", 0.05, 0.2), _qc_op),
    (OperatorSpec("augment_stub", "1.0.0", ResourceClass.GPU, "qc_passed", "augmented", 1.0, 0.2), _augment_stub),
)


def default_registry() -> OperatorRegistry:
    reg = OperatorRegistry()
    for spec, impl in BUILTIN_OPERATORS:
        reg.register(spec, impl)
    return reg


DEFAULT_SPEC = PipelineSpec(
    tuple(StageSpec(n, op) for n, op in [("segment", "segment_stub"), ("deidentify", "deidentify_stub"),
                                          ("traj", "traj_stub"), ("hand", "hand_stub"), ("qc", "qc_op"),
                                          ("augment", "augment_stub")]),
    (("segment", "deidentify"), ("deidentify", "traj"), ("traj", "hand"), ("hand", "qc"), ("qc", "augment")),
)


def clip_artifacts(clips, markers=None):
    """Wrap annotated clips as ``video`` input artifacts for the default pipeline."""
    markers = markers or {}
    return [ClipArtifact(c.clip_id, "video", {"source": c, "markers": tuple(markers.get(c.clip_id, ()))})
            for c in clips]
