"""End-to-end demo: synthetic corpus -> pipeline with QC -> fleet ingest."""
from __future__ import annotations

from pathlib import Path

from . import fleetsim, io, pipeline, synth


def run_demo(seed=0, n_clips=40, out_dir=None, scenario="paper-latency"):
    """Reports of the three stages; identical for identical ``seed``.

    Clips that pass QC are uploaded by the scenario's devices, one every
    half second, and replicated to central before the fleet report is taken.
    """
    corpus = synth.gen_corpus(seed, n_clips=n_clips)
    if out_dir is not None:
        io.write_corpus(Path(out_dir) / "corpus", corpus.clips, corpus.log, seed)

    engine = pipeline.Engine(pipeline.default_registry(), cpu_workers=2, gpu_workers=4, seed=seed)
    res = engine.run(pipeline.DEFAULT_SPEC, pipeline.clip_artifacts(corpus.clips))

    scen = fleetsim.load_scenario(scenario)
    sim = fleetsim.FleetSimulator(scen, seed)
    devices = [d.device_id for d in scen.devices]
    passed = sorted(a.clip_id for a in res.outputs)
    for i, cid in enumerate(passed):
        sim.submit(devices[i % len(devices)], cid, at_s=0.5 * i)
    fleet = sim.run(max(1.0, 0.5 * len(passed) + 5.0), drain=True, generate=False)

    reports = {
        "corpus": {"seed": seed, "clips": [c.clip_id for c in corpus.clips], "log": corpus.log},
        "pipeline": {**res.report, "hard_negatives": res.pool.to_list(), "outputs": passed},
        "fleet": {**fleet, "central_ids": sorted(sim.central_store)},
    }
    if out_dir is not None:
        for name, rep in reports.items():
            io.write_json(Path(out_dir) / f"{name}-report.json", rep)
    return reports
