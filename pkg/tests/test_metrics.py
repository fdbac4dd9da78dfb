import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aoekit import synth
from aoekit.errors import DegenerateInput, InsufficientPairs, LengthMismatch, NoOverlap
from aoekit.geometry import PoseSE3, Sim3Transform, quat_from_rotvec, random_quat
from aoekit.metrics import (
    Alignment,
    JointFrame,
    Trajectory,
    associate,
    ate,
    default_max_dt,
    evaluate_hand,
    evaluate_trajectory,
    joint_errors,
    mpjpe,
    pa_mpjpe,
    pa_mpjpe_per_frame,
    pck_auc,
    rpe,
)
from oracles import ate_oracle, best_assignment, mpjpe_loop, pck_trapezoid, rpe_oracle

seeds = st.integers(0, 2**32 - 1)


def gt_traj(seed=0, duration=10.0, fps=30.0):
    return synth.gen_trajectory(seed, duration, fps)


def random_sim3(rng):
    return Sim3Transform(float(rng.uniform(0.5, 2.0)), random_quat(rng), rng.normal(size=3))


def hand(seed=0, n=20):
    return synth.gen_hand_track(synth.gen_trajectory(seed, n / 30.0, 30.0), seed).world.joints


# -- association -------------------------------------------------------------

def test_associate_identical():
    t = np.arange(10) * 0.1
    pairs = associate(t, t, 0.01)
    assert pairs.tolist() == [[i, i] for i in range(10)]


def test_associate_offset_beyond_max_dt():
    t = np.arange(10) * 0.1
    with pytest.raises(NoOverlap):
        associate(t + 0.02, t, 0.01)


def test_associate_uses_each_sample_once():
    est = np.array([0.0, 0.01, 0.02])
    gt = np.array([0.0])
    pairs = associate(est, gt, 0.05)
    assert pairs.tolist() == [[0, 0]]


def test_associate_matches_exhaustive_assignment(rng):
    for _ in range(10):
        n = 7
        gt = np.arange(n) * 0.1
        est = gt + rng.uniform(-0.025, 0.025, n)
        got = associate(est, gt, 0.05).tolist()
        assert got == [list(p) for p in best_assignment(est, gt, 0.05)]
        assert len(got) == n


def test_associate_full_matching_at_n20(rng):
    gt = np.arange(20) / 30.0
    max_dt = default_max_dt(gt)
    est = gt + rng.uniform(-max_dt / 2, max_dt / 2, 20)
    assert associate(est, gt, max_dt).tolist() == [[i, i] for i in range(20)]


def test_default_max_dt_is_half_median_interval():
    assert default_max_dt([0.0, 0.1, 0.2, 0.4]) == pytest.approx(0.05)


# -- ATE ---------------------------------------------------------------------

def test_ate_zero_for_identical():
    gt = gt_traj()
    assert ate(gt, gt) == 0.0 or ate(gt, gt) < 1e-12
    assert ate(gt, gt, Alignment.SE3) < 1e-12


def test_ate_sim3_absorbs_similarity(rng):
    gt = gt_traj(1)
    t0 = random_sim3(rng)
    est = gt.left_transformed(t0)
    assert ate(est, gt, Alignment.SIM3) < 1e-9
    assert ate(est, gt, Alignment.SE3) > 1e-3


def test_ate_noise_response_single_seed():
    gt = synth.gen_trajectory(3, 1000 / 30.0, 30.0)
    rng = np.random.default_rng(3)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.005, gt.positions.shape), gt.quaternions)
    val = ate(est, gt)
    assert abs(val - 0.005 * math.sqrt(3)) <= 0.15 * 0.005 * math.sqrt(3)


def test_ate_matches_horn_oracle(rng):
    gt = gt_traj(4)
    est = Trajectory(gt.timestamps, random_sim3(rng).apply(gt.positions)
                     + rng.normal(0, 0.02, gt.positions.shape), gt.quaternions)
    for align, scale in ((Alignment.SIM3, True), (Alignment.SE3, False)):
        assert ate(est, gt, align) == pytest.approx(ate_oracle(est.positions, gt.positions, scale), abs=1e-12)


def test_ate_frozen_value():
    # frozen output of the Horn-based oracle on this fixture
    gt = gt_traj(7, 4.0)
    rng = np.random.default_rng(7)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape), gt.quaternions)
    assert ate_oracle(est.positions, gt.positions) == pytest.approx(FROZEN_ATE_7, abs=1e-12)
    assert ate(est, gt) == pytest.approx(FROZEN_ATE_7, abs=1e-12)


FROZEN_ATE_7 = 0.01564472913659405


def test_ate_needs_three_pairs():
    t = Trajectory([0.0, 1.0], np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)))
    with pytest.raises(DegenerateInput):
        ate(t, t)


@given(seeds)
def test_ate_sim3_invariant_under_similarity(seed):
    rng = np.random.default_rng(seed)
    gt = gt_traj(seed % 97, 3.0)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape), gt.quaternions)
    a = ate(est, gt)
    b = ate(est.left_transformed(random_sim3(rng)), gt)
    assert abs(a - b) < 1e-9


@given(seeds)
def test_ate_se3_invariant_under_rigid(seed):
    rng = np.random.default_rng(seed)
    gt = gt_traj(seed % 89, 3.0)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape), gt.quaternions)
    pose = PoseSE3(random_quat(rng), rng.normal(size=3))
    assert abs(ate(est, gt, Alignment.SE3) - ate(est.left_transformed(pose), gt, Alignment.SE3)) < 1e-9


@given(st.floats(0.2, 3.0))
def test_ate_se3_scales_linearly_with_scale_error(s):
    gt = gt_traj(5, 3.0)
    c = gt.positions.mean(axis=0)
    est = Trajectory(gt.timestamps, c + s * (gt.positions - c), gt.quaternions)
    spread = math.sqrt(np.mean(np.sum((gt.positions - c) ** 2, axis=1)))
    assert ate(est, gt, Alignment.SE3) == pytest.approx(abs(s - 1) * spread, abs=1e-9)


# -- RPE ---------------------------------------------------------------------

def test_rpe_zero_for_identical():
    gt = gt_traj()
    trans, rot = rpe(gt, gt)
    assert trans < 1e-12 and rot < 1e-6


def test_rpe_invariant_under_left_transform(rng):
    gt = gt_traj(2)
    est = gt.left_transformed(PoseSE3(random_quat(rng), rng.normal(size=3) * 10))
    trans, rot = rpe(est, gt, 3)
    assert trans < 1e-9 and rot < 1e-5


def test_rpe_constant_drift():
    # est position walks away by 1 mm per frame along the camera-frame x axis
    n = 50
    t = np.arange(n) / 30.0
    q = np.tile([1.0, 0, 0, 0], (n, 1))
    gt = Trajectory(t, np.zeros((n, 3)), q)
    est = Trajectory(t, np.c_[np.arange(n) * 0.001, np.zeros(n), np.zeros(n)], q)
    trans, rot = rpe(est, gt, 1)
    assert trans == pytest.approx(0.001, abs=1e-9)
    assert rot == 0.0


def test_rpe_matches_matrix_oracle(rng):
    gt = gt_traj(6, 3.0)
    noise = quat_from_rotvec(rng.normal(0, 0.01, (len(gt), 3)))
    from aoekit.geometry import quat_multiply

    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape),
                     quat_multiply(noise, gt.quaternions))
    for delta in (1, 5):
        got = rpe(est, gt, delta)
        want = rpe_oracle(est, gt, delta)
        assert got[0] == pytest.approx(want[0], abs=1e-9)
        assert got[1] == pytest.approx(want[1], abs=1e-6)


@given(seeds, st.integers(1, 5))
def test_rpe_left_invariance_property(seed, delta):
    rng = np.random.default_rng(seed)
    gt = gt_traj(seed % 31, 2.0)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape), gt.quaternions)
    base = rpe(est, gt, delta)
    pose = PoseSE3(random_quat(rng), rng.normal(size=3))
    moved_est = rpe(est.left_transformed(pose), gt, delta)
    moved_gt = rpe(est, gt.left_transformed(pose), delta)
    assert moved_est[0] == pytest.approx(base[0], abs=1e-9)
    assert moved_gt[0] == pytest.approx(base[0], abs=1e-9)


def test_rpe_insufficient_pairs():
    gt = gt_traj(0, 0.1)
    with pytest.raises(InsufficientPairs):
        rpe(gt, gt, delta=len(gt))


# -- MPJPE / PA-MPJPE ----------------------------------------------------------

def test_mpjpe_zero_and_constant_offset():
    j = hand()
    assert mpjpe(j, j) == 0.0
    assert mpjpe(j + np.array([0.001, 0, 0]), j) == pytest.approx(1.0, abs=1e-9)


def test_mpjpe_matches_scalar_loop(rng):
    j = hand(3)
    p = j + rng.normal(0, 0.01, j.shape)
    assert mpjpe(p, j) == pytest.approx(mpjpe_loop(p.tolist(), j.tolist()), abs=1e-9)


def test_mpjpe_accepts_joint_frames():
    j = hand(1, 5)
    frames = [JointFrame(i / 30.0, j[i]) for i in range(len(j))]
    assert mpjpe(frames, frames) == 0.0


def test_mpjpe_length_mismatch():
    j = hand(0, 10)
    with pytest.raises(LengthMismatch):
        mpjpe(j[:5], j)


def test_pa_mpjpe_absorbs_per_frame_similarity(rng):
    j = hand(2)
    p = np.stack([random_sim3(rng).apply(f) for f in j])
    assert pa_mpjpe(p, j) < 1e-9
    assert pa_mpjpe(j, j) < 1e-12


def test_pa_not_worse_than_unaligned_per_frame(rng):
    j = hand(4, 30)
    p = j + rng.normal(0, 0.005, j.shape)
    pa = pa_mpjpe_per_frame(p, j)
    rms_before = np.sqrt(np.mean(np.sum((p - j) ** 2, axis=-1), axis=1))
    from aoekit.geometry import umeyama_align

    for f in range(len(j)):
        t = umeyama_align(p[f], j[f])
        rms_after = np.sqrt(np.mean(np.sum((t.apply(p[f]) - j[f]) ** 2, axis=-1)))
        assert rms_after <= rms_before[f] + 1e-15
    assert np.all(np.isfinite(pa))


def test_pa_mpjpe_skips_degenerate_frames():
    j = hand(0, 4)
    p = j.copy()
    p[1] = 0.0  # every joint coincident
    per = pa_mpjpe_per_frame(p, j)
    assert np.isnan(per[1]) and np.all(np.isfinite(per[[0, 2, 3]]))
    assert pa_mpjpe(p, j) < 1e-9


# -- PCK / AUC ---------------------------------------------------------------

def test_auc_perfect_is_exactly_one():
    j = hand()
    curve, auc = pck_auc(j, j)
    assert auc == 1.0
    assert len(curve) == 100 and curve[-1] == (50.0, 1.0)


def test_auc_all_errors_twice_max_is_zero():
    j = hand()
    p = j + np.array([0.1, 0, 0])  # 100 mm
    assert pck_auc(p, j, 50.0, 100)[1] == 0.0


def test_auc_half_max_matches_brute_force():
    # dyadic coordinates so every error is exactly 31.25 mm = max / 2
    j = np.arange(20 * 21 * 3, dtype=float).reshape(20, 21, 3) * 0.5
    p = j + np.array([0.0, 0.03125, 0.0])
    err = joint_errors(p, j) * 1000.0
    assert np.all(err == 31.25)
    auc = pck_auc(p, j, 62.5, 100)[1]
    assert auc == pytest.approx(pck_trapezoid(err, 62.5, 100), abs=1e-12)
    # frozen: fractions are 0 up to step 49 and 1 from step 50, so area = 50.5 / 100
    assert auc == pytest.approx(0.505, abs=1e-12)


def test_auc_matches_brute_force_on_noise(rng):
    j = hand(5)
    p = j + rng.normal(0, 0.01, j.shape)
    err = joint_errors(p, j) * 1000.0
    for steps in (2, 7, 100):
        assert pck_auc(p, j, 40.0, steps)[1] == pytest.approx(pck_trapezoid(err, 40.0, steps), abs=1e-12)


@given(seeds, st.floats(1.01, 5.0))
def test_auc_monotone_in_error_scale(seed, factor):
    rng = np.random.default_rng(seed)
    j = hand(seed % 13, 6)
    d = rng.normal(0, 0.01, j.shape)
    a = pck_auc(j + d, j)[1]
    b = pck_auc(j + factor * d, j)[1]
    assert 0.0 <= b <= a <= 1.0


def test_pck_argument_checks():
    j = hand(0, 3)
    with pytest.raises(ValueError):
        pck_auc(j, j, 0.0)
    with pytest.raises(ValueError):
        pck_auc(j, j, 50.0, 1)


# -- reports / determinism ----------------------------------------------------

def test_trajectory_report_fields(rng):
    gt = gt_traj(8, 3.0)
    est = gt.left_transformed(Sim3Transform(1.3, random_quat(rng), [1, 2, 3]))
    rep = evaluate_trajectory(est, gt).to_dict()
    assert set(rep) == {"ate_rmse_m", "ate_s_rmse_m", "rpe_trans_rmse_m", "rpe_rot_rmse_deg", "n_pairs"}
    assert rep["ate_rmse_m"] < 1e-9 < rep["ate_s_rmse_m"]
    assert rep["n_pairs"] == len(gt)


def test_pose_report(rng):
    j = hand(9)
    rep = evaluate_hand(j + rng.normal(0, 0.002, j.shape), j).to_dict()
    assert set(rep) == {"mpjpe_mm", "pa_mpjpe_mm", "auc", "n_frames"}
    assert 0 <= rep["auc"] <= 1 and rep["pa_mpjpe_mm"] <= rep["mpjpe_mm"]


def test_metrics_bit_identical(rng):
    gt = gt_traj(10, 3.0)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(0, 0.01, gt.positions.shape), gt.quaternions)
    assert evaluate_trajectory(est, gt) == evaluate_trajectory(est, gt)
    j = hand(10)
    p = j + rng.normal(0, 0.01, j.shape)
    assert evaluate_hand(p, j) == evaluate_hand(p.copy(), j.copy())
