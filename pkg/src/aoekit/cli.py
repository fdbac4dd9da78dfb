"""``aoekit`` command line.

Reports go to standard output as JSON (sorted keys); diagnostics go to
standard error. Exit codes: 0 success, 1 bad input or usage, 2 runtime
failure, 3 an ``--assert`` check failed.
"""
from __future__ import annotations

import argparse
import logging
import operator
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AoeError, ParseError, ScenarioError

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_ASSERT = 0, 1, 2, 3

logger = logging.getLogger("aoekit")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# --assert
# --------------------------------------------------------------------------

_OPS = {"<=": operator.le, ">=": operator.ge, "==": operator.eq, "!=": operator.ne, "<": operator.lt,
        ">": operator.gt}
_ASSERT_RE = re.compile(r"^\s*([A-Za-z_][\w.\-]*)\s*(<=|>=|==|!=|<|>)\s*([-+0-9.eE]+|true|false)\s*$")


def parse_assert(expr):
    m = _ASSERT_RE.match(expr)
    if not m:
        raise UsageError(f"bad --assert expression {expr!r} (expected e.g. 'p95<=100')")
    field, op, raw = m.groups()
    value = {"true": True, "false": False}.get(raw)
    return field, op, float(raw) if value is None else value


def _flatten(obj, prefix=""):
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(obj, (int, float, bool)) or obj is None:
        out[prefix[:-1]] = obj
    return out


def lookup(report, field, aliases=None):
    """Resolve an --assert field: alias, exact dotted path, or a unique trailing path match."""
    flat = _flatten(report)
    path = (aliases or {}).get(field, field)
    if path in flat:
        return flat[path]
    hits = [k for k in flat if k.endswith("." + path)]
    if len(hits) == 1:
        return flat[hits[0]]
    if not hits:
        raise UsageError(f"--assert field {field!r} not in report")
    raise UsageError(f"--assert field {field!r} is ambiguous: {sorted(hits)}")


def check_asserts(report, exprs, aliases=None):
    failures = []
    for expr in exprs or ():
        field, op, want = parse_assert(expr)
        got = lookup(report, field, aliases)
        if got is None or not _OPS[op](got, want):
            failures.append(f"assertion failed: {field}={got!r} not {op} {want!r}")
    return failures


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _eval_traj(args):
    from .io import read_tum
    from .metrics import Alignment, ate, evaluate_trajectory

    est, gt = read_tum(args.est), read_tum(args.gt)
    rep = evaluate_trajectory(est, gt, rpe_delta=args.rpe_delta, max_dt=args.max_dt).to_dict()
    align = Alignment(args.alignment)
    rep["alignment"] = align.value
    rep["ate_m"] = ate(est, gt, align, args.max_dt)
    return rep, {"ate": "ate_m", "ate_s": "ate_s_rmse_m", "rpe_trans": "rpe_trans_rmse_m",
                 "rpe_rot": "rpe_rot_rmse_deg"}


def _eval_hand(args):
    from .io import read_joints_jsonl
    from .metrics import evaluate_hand

    _, pred = read_joints_jsonl(args.pred)
    _, gt = read_joints_jsonl(args.gt)
    if pred.shape != gt.shape:
        raise InputError(f"frame count mismatch: pred has {len(pred)} frames, gt has {len(gt)}")
    rep = evaluate_hand(pred, gt, args.auc_max_mm, args.auc_steps).to_dict()
    return rep, {"mpjpe": "mpjpe_mm", "pa_mpjpe": "pa_mpjpe_mm"}


def qc_corpus(clips, thresholds):
    """Verdicts, pool and summary for a list of annotated clips."""
    from .qc import HardNegativePool, Outcome, check_clip, route_failed

    pool = HardNegativePool()
    verdicts = []
    for c in clips:
        v = check_clip(c, thresholds)
        verdicts.append(v)
        if v.outcome is Outcome.FAIL and any(r.kind.value != "MALFORMED" for r in v.reasons):
            route_failed(v, pool)
    summary = {o.value: sum(v.outcome is o for v in verdicts) for o in Outcome}
    summary["n_clips"] = len(verdicts)
    summary["pool"] = {cat: sum(e.category.value == cat for e in pool) for cat in ("KINEMATIC", "REPROJECTION", "BOTH")}
    summary["malformed"] = sum(any(r.kind.value == "MALFORMED" for r in v.reasons) for v in verdicts)
    return verdicts, pool, summary


def _qc_run(args):
    from .io import dumps, read_corpus, write_json
    from .qc import QCThresholds

    clips, _ = read_corpus(args.corpus)
    th = QCThresholds(args.sigma_k, args.reproj_px, args.inspect_rate)
    verdicts, pool, summary = qc_corpus(clips, th)
    if args.pool_out:
        write_json(args.pool_out, pool.to_list())
    lines = "".join(dumps(v.to_dict()) for v in verdicts)
    return {"summary": summary}, {}, lines


def _pipeline_run(args):
    from . import pipeline as pl
    from .io import read_corpus, read_json
    from .qc import QCThresholds

    spec = pl.DEFAULT_SPEC if args.spec is None else pl.PipelineSpec.from_dict(read_json(args.spec))
    registry = pl.default_registry()
    errs = pl.validate_spec(spec, registry)
    if errs:
        raise InputError("invalid pipeline spec: " + "; ".join(e.message for e in errs))
    clips, _ = read_corpus(args.inputs)
    params = {"qc_thresholds": QCThresholds(args.sigma_k, args.reproj_px, args.inspect_rate)}
    inputs = pl.clip_artifacts(clips)
    if args.wall_clock:
        res = pl.run_wallclock(registry, spec, inputs, seed=args.seed, params=params)
    else:
        eng = pl.Engine(registry, cpu_workers=args.cpu_workers, gpu_workers=args.gpu_workers, seed=args.seed,
                        tick_s=args.tick, params=params)
        for sw in args.swap or ():
            op, ver, at = _parse_swap(sw)
            eng.at(at, lambda e, op=op, ver=ver: pl.hot_swap(e, op, ver))
        res = eng.run(spec, inputs)
    rep = dict(res.report)
    rep["outputs"] = sorted(a.clip_id for a in res.outputs)
    rep["hard_negatives"] = res.pool.to_list()
    rep["errors"] = res.errors
    return rep, {"outputs_n": "counts.outputs"}


def _parse_swap(text):
    try:
        op, ver, at = text.split("@")
        return op, ver, float(at)
    except ValueError:
        raise UsageError(f"--swap expects OP@VERSION@TIME_S, got {text!r}") from None


def _fleet_sim(args):
    from . import fleetsim as fs

    scen = fs.load_scenario(args.scenario)
    if args.routing:
        scen = scen.with_routing(args.routing)
    rep = fs.run(scen, args.duration, seed=args.seed, drain=args.drain)
    if args.csv:
        _write_fleet_csv(args.csv, rep)
    mode = scen.routing.value
    aliases = {k: f"ingest_latency_ms.{mode}.{k}" for k in ("p50", "p95", "p99", "mean", "max")}
    aliases["spike_recovery_s"] = "processing.spike_recovery_s"
    return rep, aliases


def _write_fleet_csv(path, rep):
    cols = ["t_s", "ingested", "replicated", "in_transit", "resident", "workers"]
    lines = [",".join(cols)]
    for s in rep["snapshots"]:
        lines.append(",".join("" if s.get(c) is None else repr(s.get(c)) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _synth_gen(args):
    from . import synth
    from .geometry import Sim3Transform, random_quat
    from .io import write_corpus, write_intrinsics, write_joints_jsonl, write_json, write_pixels_jsonl, write_tum

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.kind in ("traj", "hand"):
        traj = synth.gen_trajectory(args.seed, args.duration, args.fps)
    if args.kind == "traj":
        rng = synth._rng(args.seed, 11)
        t = Sim3Transform(float(rng.uniform(0.5, 2.0)), random_quat(rng), rng.normal(size=3))
        est = traj.left_transformed(t)
        if args.pos_sigma > 0:
            from .metrics import Trajectory

            est = Trajectory(est.timestamps, est.positions + rng.normal(scale=args.pos_sigma, size=est.positions.shape),
                             est.quaternions)
        write_tum(out / "gt.tum", traj)
        write_tum(out / "est.tum", est)
        written = ["gt.tum", "est.tum"]
    elif args.kind == "hand":
        sample = synth.gen_hand_track(traj, args.seed)
        noisy, _ = synth.perturb(sample.world, synth.NoiseModel(pos_sigma_m=args.pos_sigma), args.seed, camera_traj=traj)
        write_tum(out / "trajectory.tum", traj)
        write_joints_jsonl(out / "gt_joints.jsonl", sample.world.timestamps, sample.world.joints)
        write_joints_jsonl(out / "pred_joints.jsonl", noisy.timestamps, noisy.joints)
        write_pixels_jsonl(out / "pixels.jsonl", sample.world.timestamps, sample.pixels)
        write_intrinsics(out / "intrinsics.json", sample.intrinsics)
        written = ["trajectory.tum", "gt_joints.jsonl", "pred_joints.jsonl", "pixels.jsonl", "intrinsics.json"]
    elif args.kind == "corpus":
        corp = synth.gen_corpus(args.seed, n_clips=args.n_clips, spike_fraction=args.spike_fraction,
                                offset_fraction=args.offset_fraction, offset_px=args.offset_px,
                                duration_s=args.duration, fps=args.fps)
        write_corpus(out, corp.clips, corp.log, args.seed)
        written = ["manifest.json", "clips/"]
    else:
        recipe = synth.ScenarioRecipe(seed=args.seed, n_regions=args.n_regions, n_devices=args.n_devices,
                                      named=args.named)
        write_json(out / "scenario.json", synth.gen_fleet_topology(recipe))
        written = ["scenario.json"]
    return {"kind": args.kind, "seed": args.seed, "out": str(out), "files": written}, {}


def _demo(args):
    from .demo import run_demo

    reps = run_demo(args.seed, n_clips=args.n_clips, out_dir=args.out)
    return reps, {}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every stochastic step")
    p.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS, help="indented JSON")
    p.add_argument("--assert", dest="asserts", action="append", default=argparse.SUPPRESS, metavar="EXPR",
                   help="check a report field, e.g. 'p95<=100' (exit 3 on violation)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _qc_flags(p):
    p.add_argument("--sigma-k", type=float, default=3.0)
    p.add_argument("--reproj-px", type=float, default=5.0)
    p.add_argument("--inspect-rate", type=float, default=0.05)


def build_parser():
    parser = _Parser(prog="aoekit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aoekit {__version__}")
    _common(parser)
    sub = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    ev = sub.add_parser("eval", help="trajectory and hand-pose metrics").add_subparsers(
        dest="cmd", required=True, parser_class=_Parser)
    p = ev.add_parser("traj", help="ATE / ATE-S / RPE between two TUM files")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--alignment", choices=["sim3", "se3"], default="sim3")
    p.add_argument("--rpe-delta", type=int, default=1)
    p.add_argument("--max-dt", type=float, default=None)
    _common(p)
    p.set_defaults(func=_eval_traj)
    p = ev.add_parser("hand", help="MPJPE / PA-MPJPE / PCK AUC between two joint files")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--auc-max-mm", type=float, default=50.0)
    p.add_argument("--auc-steps", type=int, default=100)
    _common(p)
    p.set_defaults(func=_eval_hand)

    q = sub.add_parser("qc", help="quality control").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    p = q.add_parser("run", help="QC verdicts for a corpus directory (JSON Lines + summary)")
    p.add_argument("corpus")
    _qc_flags(p)
    p.add_argument("--pool-out", default=None, help="write the hard-negative pool as a JSON array")
    _common(p)
    p.set_defaults(func=_qc_run)

    pp = sub.add_parser("pipeline", help="workflow engine").add_subparsers(dest="cmd", required=True,
                                                                           parser_class=_Parser)
    p = pp.add_parser("run", help="run a pipeline spec over a corpus directory")
    p.add_argument("--spec", default=None, help="PipelineSpec JSON (default: built-in six-stage pipeline)")
    p.add_argument("--inputs", required=True, help="corpus directory")
    p.add_argument("--cpu-workers", type=int, default=2)
    p.add_argument("--gpu-workers", type=int, default=4)
    p.add_argument("--tick", type=float, default=1.0, help="queue-depth sampling period (s)")
    p.add_argument("--swap", action="append", metavar="OP@VERSION@T", help="hot swap at simulated time T")
    p.add_argument("--wall-clock", action="store_true", help="time operators on the wall clock (not reproducible)")
    _qc_flags(p)
    _common(p)
    p.set_defaults(func=_pipeline_run)

    fl = sub.add_parser("fleet", help="edge ingestion simulator").add_subparsers(dest="cmd", required=True,
                                                                                 parser_class=_Parser)
    p = fl.add_parser("sim", help="simulate a fleet scenario")
    p.add_argument("--scenario", required=True, help="built-in name (e.g. paper-latency) or JSON file")
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--routing", default=None, help="centralized | geo | probes (default: scenario's)")
    p.add_argument("--drain", action="store_true", help="replicate to quiescence after the run")
    p.add_argument("--csv", default=None, help="write snapshot time series as CSV")
    _common(p)
    p.set_defaults(func=_fleet_sim)

    sy = sub.add_parser("synth", help="synthetic data").add_subparsers(dest="cmd", required=True,
                                                                        parser_class=_Parser)
    p = sy.add_parser("gen", help="generate fixtures")
    p.add_argument("--kind", choices=["traj", "hand", "corpus", "fleet"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--pos-sigma", type=float, default=0.0, help="position noise (m) for traj/hand")
    p.add_argument("--n-clips", type=int, default=100)
    p.add_argument("--spike-fraction", type=float, default=0.3)
    p.add_argument("--offset-fraction", type=float, default=0.0)
    p.add_argument("--offset-px", type=float, default=6.0)
    p.add_argument("--n-regions", type=int, default=3)
    p.add_argument("--n-devices", type=int, default=100)
    p.add_argument("--named", default=None, help="built-in scenario name for --kind fleet")
    _common(p)
    p.set_defaults(func=_synth_gen)

    p = sub.add_parser("demo", help="synth corpus -> pipeline with QC -> fleet ingest")
    p.add_argument("--n-clips", type=int, default=40)
    p.add_argument("--out", default=None)
    _common(p)
    p.set_defaults(func=_demo, cmd=None)
    return parser


def main(argv=None) -> int:
    from .io import dumps

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.seed = getattr(args, "seed", 0)
    args.pretty = getattr(args, "pretty", False)
    args.asserts = getattr(args, "asserts", [])
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
        report, aliases = out[0], out[1]
        prefix = out[2] if len(out) > 2 else ""
        failures = check_asserts(report, args.asserts, aliases)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except (ParseError, ScenarioError, InputError, FileNotFoundError, IsADirectoryError, KeyError,
            ValueError, AoeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - unexpected runtime failure
        logger.exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(prefix + dumps(_jsonable(report), pretty=args.pretty))
    for f in failures:
        print(f, file=sys.stderr)
    return EXIT_ASSERT if failures else EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
