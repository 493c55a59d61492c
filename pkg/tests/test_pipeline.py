import numpy as np
import pytest

from egopolicy import pipeline, simenv
from egopolicy.filtering import FilterConfig
from egopolicy.labels import LabelConfig, MissingHomography
from egopolicy.retarget import SmoothingConfig
from egopolicy.simenv import SceneConfig, gen_human_clip


@pytest.fixture(scope="module")
def raw_clip():
    return gen_human_clip(SceneConfig(task="stack_pots", seed=21), seed=21)


@pytest.fixture(scope="module")
def truth_clip():
    return gen_human_clip(SceneConfig(task="stack_pots", seed=22), seed=22, return_truth=True)


class TestRobotize:
    def test_recovers_generator_positions(self, truth_clip):
        bundle, truth = truth_clip
        # window 1 disables smoothing so the fit is directly comparable
        cfg = SmoothingConfig(1, 1, 1)
        out = pipeline.robotize_bundle(bundle, cfg)
        err = np.abs(out.ee_poses[:, :, :3] - truth["ee"][:, :, :3]).max()
        assert err < 1e-5
        assert np.all(out.ee_valid)
        assert not out.sentinel.any()

    def test_smoothing_preserves_length_and_validity(self, raw_clip):
        out = pipeline.robotize_bundle(raw_clip)
        assert out.ee_poses.shape == (raw_clip.n_frames, 2, 8)
        assert np.all(np.isfinite(out.ee_poses))
        # unit quaternions after windowed averaging
        norms = np.linalg.norm(out.ee_poses[:, :, 3:7], axis=2)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_missing_hand_patching(self, raw_clip):
        clip = pipeline.copy.deepcopy(raw_clip)
        clip.presence[10:, 1] = False  # right hand disappears at frame 10
        out = pipeline.robotize_bundle(clip, SmoothingConfig(1, 1, 1))
        for t in range(10, clip.n_frames):
            assert np.array_equal(out.ee_poses[t, 1], out.ee_poses[9, 1])
        assert np.all(out.keep)

    def test_never_visible_hand_is_sentinel(self, raw_clip):
        clip = pipeline.copy.deepcopy(raw_clip)
        clip.presence[:, 0] = False
        out = pipeline.robotize_bundle(clip, SmoothingConfig(1, 1, 1))
        assert tuple(out.sentinel) == (True, False)
        assert not out.ee_valid[:, 0].any()

    def test_input_not_mutated(self, raw_clip):
        before = raw_clip.presence.copy()
        pipeline.robotize_bundle(raw_clip)
        assert np.array_equal(raw_clip.presence, before)
        assert raw_clip.ee_poses is None


class TestLabel:
    def test_labels_attached_with_config_horizon(self, raw_clip):
        out = pipeline.label_bundle(pipeline.robotize_bundle(raw_clip), LabelConfig(horizon=6))
        assert out.label_waypoints.shape == (raw_clip.n_frames, 2, 7, 2)
        assert np.all(out.label_valid)

    def test_sentinel_hand_gets_sentinel_labels(self, raw_clip):
        clip = pipeline.copy.deepcopy(raw_clip)
        clip.presence[:, 0] = False
        out = pipeline.label_bundle(pipeline.robotize_bundle(clip), LabelConfig(horizon=4))
        assert not out.label_valid[:, 0].any()
        assert np.all(out.label_waypoints[:, 0] == -1.0)
        assert np.all(out.label_valid[:, 1])

    def test_requires_robotize_first(self, raw_clip):
        with pytest.raises(ValueError):
            pipeline.label_bundle(raw_clip)

    def test_moving_camera_without_plane_rejected(self, raw_clip):
        clip = pipeline.robotize_bundle(raw_clip)
        clip.plane = None
        with pytest.raises(MissingHomography):
            pipeline.label_bundle(clip)

    def test_normalized_labels_mostly_in_unit_square(self, raw_clip):
        out = pipeline.label_bundle(pipeline.robotize_bundle(raw_clip))
        wps = out.label_waypoints[out.label_valid]
        inside = (wps >= 0) & (wps <= 1)
        assert inside.mean() > 0.95


class TestFilter:
    def test_spiky_clip_drops_expected_frames(self):
        scene = SceneConfig(task="stack_pots", spike_every=8, spike_mag=0.08, seed=31)
        clip = gen_human_clip(scene, seed=31)
        processed, report = pipeline.process_human_bundle(clip)
        expected_drops = (clip.n_frames - 1) // 8
        assert report.dropped_camera_motion == expected_drops
        assert report.kept_frames == clip.n_frames - expected_drops
        # dropped frames are exactly those entered by a spike step
        dropped = np.flatnonzero(~processed.keep)
        assert all((t % 8) == 0 and t > 0 for t in dropped)

    def test_quiet_clip_keeps_everything(self, raw_clip):
        _, report = pipeline.process_human_bundle(raw_clip)
        assert report.kept_frames == raw_clip.n_frames

    def test_workspace_violation_detected(self, raw_clip):
        clip = pipeline.robotize_bundle(raw_clip, SmoothingConfig(1, 1, 1))
        clip.ee_poses[5, 0, :3] = [3.0, 0.0, 0.0]
        out, report = pipeline.filter_bundle(clip, FilterConfig(workspace_radius=1.0))
        assert not out.keep[5]
        assert report.dropped_invalid_action >= 1
