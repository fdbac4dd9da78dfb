import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aoekit import synth
from aoekit.errors import BadWindow, NoOverlap, TooShort, WindowTooLarge
from aoekit.geometry import PoseSE3, random_quat
from aoekit.kinematics import (
    FrameOfReference,
    HandTrack,
    KinematicSmoother,
    VelocityOutlierDetector,
    VelocityProfile,
    detect_outliers,
    joint_velocities,
    sliding_window_smooth,
    smooth_series,
    to_camera,
    to_world,
    total_squared_acceleration,
)
from aoekit.metrics import Trajectory, mpjpe
from oracles import central_difference_speeds, dense_window_solution, outlier_frames, rodrigues

seeds = st.integers(0, 2**32 - 1)


def identity_traj(n, fps=30.0):
    return Trajectory(np.arange(n) / fps, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)))


def sample(seed=0, duration=2.0):
    traj = synth.gen_trajectory(seed, duration, 30.0)
    return traj, synth.gen_hand_track(traj, seed)


def track_from(joints, fps=30.0, frame=FrameOfReference.CAMERA):
    return HandTrack(fps, np.arange(len(joints)) / fps, joints, frame)


# -- to_world ------------------------------------------------------------------

def test_identity_camera_leaves_joints():
    _, s = sample()
    out = to_world(s.camera, identity_traj(len(s.camera)))
    assert np.array_equal(out.joints, s.camera.joints)
    assert out.frame_of_reference is FrameOfReference.WORLD


def test_constant_translation_shifts_joints():
    _, s = sample()
    n = len(s.camera)
    traj = Trajectory(np.arange(n) / 30.0, np.tile([1.0, 0, 0], (n, 1)), np.tile([1.0, 0, 0, 0], (n, 1)))
    out = to_world(s.camera, traj)
    assert np.allclose(out.joints, s.camera.joints + [1, 0, 0], atol=1e-15)


def test_to_world_matches_reference_loop():
    traj, s = sample(3)
    out = to_world(s.camera, traj)
    for f in range(len(traj)):
        r = rodrigues(traj.quaternions[f])
        for j in range(21):
            assert np.allclose(out.joints[f, j], r @ s.camera.joints[f, j] + traj.positions[f], atol=1e-12)


def test_to_world_inverts_synth_construction():
    traj, s = sample(4)
    assert np.allclose(to_world(s.camera, traj).joints, s.world.joints, atol=1e-9)
    assert np.allclose(to_camera(s.world, traj).joints, s.camera.joints, atol=1e-9)


def test_to_world_drops_unmatched_frames():
    traj, s = sample(5)
    keep = np.r_[0:20, 30:len(traj)]
    out, dropped = to_world(s.camera, traj.subset(keep), return_dropped=True)
    assert dropped == 10 and len(out) == len(traj) - 10


def test_to_world_no_overlap():
    _, s = sample()
    far = Trajectory(np.arange(5) + 100.0, np.zeros((5, 3)), np.tile([1.0, 0, 0, 0], (5, 1)))
    with pytest.raises(NoOverlap):
        to_world(s.camera, far)


@given(seeds)
def test_world_frame_choice_does_not_change_mpjpe(seed):
    rng = np.random.default_rng(seed)
    traj, s = sample(seed % 17, 1.0)
    pred_cam = s.camera.with_joints(s.camera.joints + rng.normal(0, 0.005, s.camera.joints.shape))
    base = mpjpe(to_world(pred_cam, traj), s.world)
    g = PoseSE3(random_quat(rng), rng.normal(size=3) * 5)
    moved_traj = traj.left_transformed(g)
    moved_gt = s.world.with_joints(g.apply(s.world.joints))
    assert abs(mpjpe(to_world(pred_cam, moved_traj), moved_gt) - base) < 1e-9


# -- velocities ----------------------------------------------------------------

def test_static_hand_zero_speed():
    j = np.tile(synth.hand_template(0), (10, 1, 1))
    assert np.all(joint_velocities(track_from(j)).speeds == 0)


def test_linear_motion_constant_speed():
    n = 30
    t = np.arange(n) / 30.0
    direction = np.array([0.6, 0.0, 0.8])
    j = synth.hand_template(1)[None] + (0.5 * t)[:, None, None] * direction
    sp = joint_velocities(track_from(j)).speeds
    assert np.allclose(sp, 0.5, atol=1e-9)


def test_velocities_match_finite_difference_oracle():
    _, s = sample(6)
    got = joint_velocities(s.world).speeds
    want = central_difference_speeds(s.world.joints, s.world.timestamps)
    assert np.allclose(got, want, atol=1e-12)


def test_velocities_too_short():
    with pytest.raises(TooShort):
        joint_velocities(track_from(np.zeros((2, 21, 3))))


# -- outliers ------------------------------------------------------------------

def test_constant_speed_has_no_flags():
    sp = np.full((30, 21), 0.4)
    f = detect_outliers(VelocityProfile(np.arange(30) / 30, sp))
    assert f.frames == [] and f.degenerate_sigma and f.sigma_used < 1e-15


def test_degenerate_sigma_flags_differing_frames():
    sp = np.full((30, 21), 0.4)
    sp[7, 3] = 0.4 + 1e-6
    # sigma is tiny but not zero here, so the ordinary rule applies
    assert detect_outliers(VelocityProfile(np.arange(30) / 30, sp)).frames == [7]


def test_injected_ten_sigma_frame_flagged(rng):
    sp = rng.uniform(0.1, 0.3, (60, 21))
    mean, sigma = sp.mean(), sp.std()
    sp[25, 4] = mean + 10 * sigma
    f = detect_outliers(VelocityProfile(np.arange(60) / 30, sp))
    assert f.frames == outlier_frames(sp.tolist(), 3.0) == [25]
    assert f.mean_used == pytest.approx(sp.mean()) and f.sigma_used == pytest.approx(sp.std())


def test_infinite_k_flags_nothing(rng):
    sp = rng.uniform(0, 1, (20, 21))
    sp[3] = 100
    assert detect_outliers(VelocityProfile(np.arange(20) / 30, sp), k=np.inf).frames == []
    assert detect_outliers(VelocityProfile(np.arange(20) / 30, sp), k=1e12).frames == []


def test_outliers_match_brute_force_on_100_clips():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        sp = rng.gamma(2.0, 0.1, (40, 21))
        for f in rng.choice(40, size=rng.integers(0, 4), replace=False):
            sp[f, rng.integers(21)] *= rng.uniform(2, 30)
        k = float(rng.uniform(1.5, 4.0))
        got = detect_outliers(VelocityProfile(np.arange(40) / 30, sp), k).frames
        assert got == outlier_frames(sp.tolist(), k), seed


def test_detector_estimator_interface(rng):
    sp = rng.uniform(0, 1, (20, 21))
    det = VelocityOutlierDetector(k=2.0).fit(sp)
    assert det.threshold() == pytest.approx(sp.mean() + 2 * sp.std())
    assert np.array_equal(det.predict(sp), VelocityOutlierDetector(k=2.0).fit_predict(sp))
    assert det.get_params() == {"k": 2.0}


# -- smoother ------------------------------------------------------------------

def noisy_sinusoid(n=120, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / 30.0
    base = np.sin(2 * np.pi * 0.7 * t)[:, None] * np.array([0.1, 0.05, 0.02])
    return base + rng.normal(0, 0.005, (n, 3))


def test_lambda_zero_is_identity():
    _, s = sample(7)
    out = sliding_window_smooth(s.world, 11, 0.0)
    assert np.array_equal(out.joints, s.world.joints)


@given(st.floats(0.0, 1e4), st.sampled_from([3, 5, 11, 21]))
def test_linear_motion_is_fixed_point(lam, window):
    t = np.arange(40) / 30.0
    j = synth.hand_template(2)[None] + (t[:, None, None] * np.array([0.3, -0.2, 0.1]))
    tr = track_from(j)
    assert np.allclose(sliding_window_smooth(tr, window, lam).joints, j, atol=1e-9)


@pytest.mark.parametrize("n", [11, 12, 57, 200])
def test_matches_dense_whole_sequence_solve(n):
    x = noisy_sinusoid(n, n)
    got = smooth_series(x, 11, 10.0)
    want = dense_window_solution(x, 11, 10.0)
    assert np.max(np.abs(got - want)) <= 1e-6
    assert total_squared_acceleration(got) < total_squared_acceleration(x)


FROZEN_CENTRE = 5.0 / 12.0


def test_dense_oracle_frozen_centre_value():
    # one window, hand-solvable: x = [0, 0, 1, 0, 0], lambda = 1
    x = np.array([[0.0], [0.0], [1.0], [0.0], [0.0]])
    got = smooth_series(x, 5, 1.0)
    a = np.eye(5)
    d = np.array([[1, -2, 1, 0, 0], [0, 1, -2, 1, 0], [0, 0, 1, -2, 1]], dtype=float)
    want = np.linalg.solve(a + d.T @ d, x)
    assert np.allclose(got, want, atol=1e-12)
    assert got[2, 0] == pytest.approx(FROZEN_CENTRE, abs=1e-12)


def test_smoother_preserves_frames_and_timestamps():
    _, s = sample(8)
    out = sliding_window_smooth(s.world)
    assert len(out) == len(s.world)
    assert np.array_equal(out.timestamps, s.world.timestamps)
    assert out.frame_of_reference is s.world.frame_of_reference


@given(seeds, st.floats(0.1, 100.0), st.sampled_from([3, 5, 7, 11]))
def test_smoothing_does_not_increase_acceleration(seed, lam, window):
    x = noisy_sinusoid(60, seed % 1000)
    assert total_squared_acceleration(smooth_series(x, window, lam)) <= total_squared_acceleration(x) + 1e-12


def test_smoothing_does_not_raise_max_speed_on_spike_family():
    for seed in range(20):
        traj, s = sample(seed, 2.0)
        spiked, _ = synth.perturb(s.world, synth.NoiseModel(spikes=((20 + seed, 10.0 + seed),)), seed,
                                  camera_traj=traj)
        raw = joint_velocities(spiked).speeds.max()
        smooth = joint_velocities(sliding_window_smooth(spiked)).speeds.max()
        assert smooth <= raw + 1e-9


@pytest.mark.parametrize("window", [4, 1, 2, 3.5])
def test_bad_window(window):
    with pytest.raises(BadWindow):
        smooth_series(np.zeros((20, 3)), window, 1.0)


def test_window_too_large():
    with pytest.raises(WindowTooLarge):
        smooth_series(np.zeros((5, 3)), 7, 1.0)


def test_smoother_estimator_shape_roundtrip():
    _, s = sample(9)
    est = KinematicSmoother(window=5, lambda_acc=3.0)
    out = est.fit_transform(s.world.joints)
    assert out.shape == s.world.joints.shape
    assert np.allclose(out, sliding_window_smooth(s.world, 5, 3.0).joints)


def test_handtrack_rejects_inconsistent_rate():
    with pytest.raises(ValueError):
        HandTrack(30.0, np.arange(5) / 10.0, np.zeros((5, 21, 3)))
