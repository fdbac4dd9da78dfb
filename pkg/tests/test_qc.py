import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aoekit import synth
from aoekit.errors import NotAFailure
from aoekit.qc import (
    AnnotatedClip,
    Category,
    HardNegativePool,
    Outcome,
    QCThresholds,
    QCVerdict,
    Reason,
    ReasonKind,
    check_clip,
    inspection_hash,
    is_pass,
    reprojection_error,
    route_failed,
    sample_for_inspection,
)

NO_SAMPLING = QCThresholds(inspect_rate=0.0)


def clean_clip(seed=0, **kw):
    kw.setdefault("pos_sigma_m", 0.0)
    kw.setdefault("pixel_sigma_px", 0.0)
    clip, _, sample = synth.gen_clip(f"c{seed}", seed, **kw)
    return clip, sample


# -- reprojection --------------------------------------------------------------

def test_clean_reprojection_is_zero():
    clip, _ = clean_clip(1)
    r = reprojection_error(clip.track, clip.trajectory, clip.intrinsics, clip.observed)
    assert r.clip_mean_px < 1e-6 and r.n_behind == 0 and r.n_dropped_frames == 0


def test_three_four_shift_gives_five_pixels():
    clip, _ = clean_clip(2, pixel_offset_px=(3.0, 4.0))
    r = reprojection_error(clip.track, clip.trajectory, clip.intrinsics, clip.observed)
    assert r.clip_mean_px == pytest.approx(5.0, abs=1e-6)
    assert np.allclose(r.per_frame_px, 5.0, atol=1e-6)


def test_gaussian_pixel_noise_gives_rayleigh_mean():
    # 4 s at 30 fps: 120 frames x 21 joints = 2520 samples
    clip, _ = clean_clip(3, duration_s=4.0, pixel_sigma_px=2.0)
    r = reprojection_error(clip.track, clip.trajectory, clip.intrinsics, clip.observed)
    expected = 2.0 * math.sqrt(math.pi / 2.0)
    assert abs(r.clip_mean_px - expected) / expected < 0.10


def test_reprojection_needs_world_track():
    clip, sample = clean_clip(4)
    with pytest.raises(ValueError):
        reprojection_error(sample.camera, clip.trajectory, clip.intrinsics, clip.observed)


# -- verdicts --------------------------------------------------------------------

def test_clean_clip_passes():
    clip, _ = clean_clip(5)
    v = check_clip(clip, NO_SAMPLING)
    assert v.outcome is Outcome.PASS and v.reasons == () and is_pass(v)


@pytest.mark.parametrize("frame,magnitude", [(17, 12.0), (40, 10.0), (3, 20.0), (86, 15.0)])
def test_spike_flags_neighbouring_frames(frame, magnitude):
    clip, _ = clean_clip(6, pos_sigma_m=0.0003, pixel_sigma_px=0.5, spikes=((frame, magnitude),))
    v = check_clip(clip, NO_SAMPLING)
    assert v.outcome is Outcome.FAIL
    assert v.reason_kinds == [ReasonKind.VELOCITY_OUTLIER]
    assert set(v.reasons[0].frames) == {frame - 1, frame + 1}


def test_six_pixel_offset_fails_reprojection():
    clip, _ = clean_clip(7, pixel_offset_px=(6.0, 0.0))
    v = check_clip(clip, NO_SAMPLING)
    assert v.reason_kinds == [ReasonKind.REPROJECTION]
    assert v.reasons[0].mean_px == pytest.approx(6.0, abs=1e-6)


def test_four_pixel_offset_passes():
    clip, _ = clean_clip(8, pixel_offset_px=(0.0, 4.0))
    assert check_clip(clip, NO_SAMPLING).outcome is Outcome.PASS


def test_both_reasons_when_both_fail():
    clip, _ = clean_clip(9, spikes=((30, 15.0),), pixel_offset_px=(6.0, 0.0))
    v = check_clip(clip, NO_SAMPLING)
    assert v.reason_kinds == [ReasonKind.VELOCITY_OUTLIER, ReasonKind.REPROJECTION]


def test_malformed_clip_is_error_not_raise():
    clip, _ = clean_clip(10)
    bad = AnnotatedClip(clip.clip_id, clip.track, clip.trajectory, clip.intrinsics, clip.observed[:5])
    v = check_clip(bad)
    assert v.reason_kinds == [ReasonKind.MALFORMED]
    with pytest.raises(NotAFailure):
        route_failed(v, HardNegativePool())


def test_relaxing_thresholds_never_turns_pass_into_fail():
    corpus = synth.gen_corpus(11, n_clips=15, spike_fraction=0.4, offset_fraction=0.3)
    strict = QCThresholds(sigma_k=3.0, reproj_px=5.0, inspect_rate=0.0)
    loose = QCThresholds(sigma_k=6.0, reproj_px=8.0, inspect_rate=0.0)
    for clip in corpus.clips:
        if is_pass(check_clip(clip, strict)):
            assert is_pass(check_clip(clip, loose))


def test_check_clip_is_idempotent():
    clip, _ = clean_clip(12, spikes=((20, 12.0),))
    a, b = check_clip(clip), check_clip(clip)
    assert a.to_dict() == b.to_dict()
    assert QCVerdict.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_corpus_failures_are_exactly_the_spiked_clips():
    corpus = synth.gen_corpus(13, n_clips=40, spike_fraction=0.3)
    failed = {c.clip_id for c in corpus.clips if not is_pass(check_clip(c, NO_SAMPLING))}
    assert failed == corpus.spiked_ids and failed


def test_thresholds_validate():
    with pytest.raises(ValueError):
        QCThresholds(inspect_rate=1.5)
    with pytest.raises(ValueError):
        QCThresholds(sigma_k=0)


# -- inspection sampling ---------------------------------------------------------

def test_sampling_rate_extremes():
    ids = [f"id-{i}" for i in range(500)]
    assert not any(sample_for_inspection(i, 0.0) for i in ids)
    assert all(sample_for_inspection(i, 1.0) for i in ids)


def test_sampling_fraction_near_rate():
    frac = np.mean([sample_for_inspection(f"clip-{i:05d}", 0.05) for i in range(10_000)])
    assert 0.04 <= frac <= 0.06


def test_inspection_hash_is_stable():
    # blake2b(id, digest_size=8), big-endian, over 2**64
    import hashlib
    want = int.from_bytes(hashlib.blake2b(b"clip-0", digest_size=8).digest(), "big") / 2.0**64
    assert inspection_hash("clip-0") == want == 0.4198738843305802
    assert inspection_hash("clip-13-0007") == 0.18671903064850595
    assert 0.0 <= inspection_hash("") < 1.0


@given(st.text(max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_sampling_is_monotone_in_rate(cid, a, b):
    lo, hi = sorted((a, b))
    assert sample_for_inspection(cid, lo) <= sample_for_inspection(cid, hi)


def test_sampled_clip_gets_inspect_outcome():
    clip, _ = clean_clip(14)
    v = check_clip(clip, QCThresholds(inspect_rate=1.0))
    assert v.outcome is Outcome.INSPECT_SAMPLED and is_pass(v)


# -- hard-negative pool ----------------------------------------------------------

def fail(cid, *kinds):
    reasons = []
    for k in kinds:
        if k is ReasonKind.VELOCITY_OUTLIER:
            reasons.append(Reason(k, frames=(4, 6)))
        else:
            reasons.append(Reason(k, mean_px=7.0))
    return QCVerdict(cid, Outcome.FAIL, tuple(reasons))


def test_both_reasons_get_both_category():
    pool = HardNegativePool()
    e = route_failed(fail("a", ReasonKind.VELOCITY_OUTLIER, ReasonKind.REPROJECTION), pool, now=3.0)
    assert e.category is Category.BOTH and e.enqueued_at == 3.0 and "a" in pool


def test_routing_same_clip_twice_keeps_one_entry():
    pool = HardNegativePool()
    route_failed(fail("a", ReasonKind.REPROJECTION), pool, 1.0)
    route_failed(fail("a", ReasonKind.VELOCITY_OUTLIER), pool, 2.0)
    assert len(pool) == 1 and pool.get("a").category is Category.KINEMATIC


def test_pass_verdict_is_not_routed():
    with pytest.raises(NotAFailure):
        route_failed(QCVerdict("p", Outcome.PASS), HardNegativePool())


def test_drain_set_algebra(rng):
    kinds = [(ReasonKind.VELOCITY_OUTLIER,), (ReasonKind.REPROJECTION,),
             (ReasonKind.VELOCITY_OUTLIER, ReasonKind.REPROJECTION)]
    pool = HardNegativePool()
    cats = {}
    for i in range(50):
        e = route_failed(fail(f"f{i}", *kinds[rng.integers(3)]), pool, float(i))
        cats[e.clip_id] = e.category
    kin = {e.clip_id for e in pool.drain(Category.KINEMATIC)}
    assert kin == {c for c, k in cats.items() if k in (Category.KINEMATIC, Category.BOTH)}
    rest = {e.clip_id for e in pool.drain()}
    assert rest == {c for c, k in cats.items() if k is Category.REPROJECTION}
    assert kin | rest == set(cats) and not kin & rest and len(pool) == 0


def test_pool_preserves_insertion_order():
    pool = HardNegativePool()
    for cid in ("z", "a", "m"):
        route_failed(fail(cid, ReasonKind.REPROJECTION), pool)
    assert [d["clip_id"] for d in pool.to_list()] == ["z", "a", "m"]


def test_verdict_invariants():
    with pytest.raises(ValueError):
        QCVerdict("x", Outcome.FAIL)
    with pytest.raises(ValueError):
        QCVerdict("x", Outcome.PASS, (Reason(ReasonKind.REPROJECTION, mean_px=1.0),))
