import math

import numpy as np
import pytest

from egopolicy import geom, retarget
from egopolicy.retarget import (
    DegenerateHand,
    EEPose,
    EmptyTrajectory,
    HandKeypoints21,
    Side,
    SmoothingConfig,
)


def make_hand(wrist, thumb, index, side=Side.RIGHT, rng=None):
    """21 keypoints with the three landmarks that matter pinned; filler elsewhere."""
    rng = rng or np.random.default_rng(0)
    pts = np.asarray(wrist, dtype=float) + 0.01 * rng.standard_normal((21, 3))
    pts[retarget.WRIST] = wrist
    pts[retarget.THUMB_TIP] = thumb
    pts[retarget.INDEX_TIP] = index
    return HandKeypoints21(pts, np.zeros((21, 2)), 1.0, side)


class TestFitEEPose:
    def test_zero_separation_gives_zero_grip(self):
        hand = make_hand([0, 0, 0], [0.1, 0, 0], [0.1, 0, 0])
        assert retarget.fit_ee_pose(hand).grip == 0.0

    def test_grip_clamps_at_full_aperture(self):
        hand = make_hand([0, 0, 0], [0.09, 0.05, 0], [0.09, -0.05, 0])
        assert retarget.fit_ee_pose(hand, aperture_max=0.085).grip == 1.0

    def test_canonical_hand_frame(self):
        # hand-computed oracle: approach +x, closing -y, palm normal -z
        hand = make_hand([0, 0, 0], [0.09, 0.05, 0], [0.09, -0.05, 0])
        pose = retarget.fit_ee_pose(hand, aperture_max=0.085)
        assert np.allclose(pose.position, [0.09, 0, 0], atol=1e-12)
        r = geom.quat_to_mat(pose.orientation)
        assert np.allclose(r[:, 0], [1, 0, 0], atol=1e-9)
        assert np.allclose(r[:, 1], [0, -1, 0], atol=1e-9)
        assert np.allclose(r[:, 2], [0, 0, -1], atol=1e-9)
        # equivalently a half-turn about x
        assert min(
            np.linalg.norm(pose.orientation - [0, 1, 0, 0]),
            np.linalg.norm(pose.orientation + [0, 1, 0, 0]),
        ) < 1e-9

    def test_grip_scales_with_separation(self):
        hand = make_hand([0, 0, 0], [0.1, 0.017, 0], [0.1, -0.017, 0])
        assert retarget.fit_ee_pose(hand, aperture_max=0.085).grip == pytest.approx(
            0.034 / 0.085
        )

    def test_degenerate_hand_raises(self):
        hand = make_hand([0, 0, 0], [1e-9, 0, 0], [-1e-9, 0, 0])
        with pytest.raises(DegenerateHand):
            retarget.fit_ee_pose(hand)

    def test_orientation_is_proper_rotation(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.standard_normal(3) * 0.1
            t = w + rng.standard_normal(3) * 0.08
            i = w + rng.standard_normal(3) * 0.08
            try:
                pose = retarget.fit_ee_pose(make_hand(w, t, i, rng=rng))
            except DegenerateHand:
                continue
            r = geom.quat_to_mat(pose.orientation)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9
            assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9

    def test_grip_invariant_under_rigid_motion(self):
        rng = np.random.default_rng(2)
        hand = make_hand([0.02, 0.01, 0.4], [0.1, 0.03, 0.45], [0.11, -0.02, 0.41], rng=rng)
        base = retarget.fit_ee_pose(hand)
        for _ in range(50):
            tf = geom.RigidTransform(
                geom.quat_from_axis_angle(rng.standard_normal(3), rng.uniform(-math.pi, math.pi)),
                rng.standard_normal(3),
            )
            moved = HandKeypoints21(tf.apply(hand.points), hand.points2d, 1.0, hand.side)
            assert retarget.fit_ee_pose(moved).grip == pytest.approx(base.grip, abs=1e-9)


def _const_pose(x, side=Side.LEFT):
    return EEPose([x, 0, 0], [1, 0, 0, 0], 0.5, side)


class TestSmooth:
    def test_empty_raises(self):
        with pytest.raises(EmptyTrajectory):
            retarget.smooth([])

    def test_constant_trajectory_unchanged(self):
        traj = [_const_pose(0.3) for _ in range(7)]
        out = retarget.smooth(traj)
        for a, b in zip(traj, out):
            assert np.allclose(a.position, b.position)
            assert np.allclose(a.orientation, b.orientation)
            assert a.grip == b.grip

    def test_centered_mean_with_border_shrink(self):
        traj = [_const_pose(x) for x in [0, 0, 3, 0, 0]]
        cfg = SmoothingConfig(position_window=3, orientation_window=3, grip_window=3)
        out = retarget.smooth(traj, cfg)
        assert [p.position[0] for p in out] == pytest.approx([0, 1, 1, 1, 0])

    def test_window_one_is_identity(self):
        rng = np.random.default_rng(3)
        traj = [
            EEPose(rng.standard_normal(3), geom.quat_normalize(rng.standard_normal(4)),
                   rng.uniform(), Side.RIGHT)
            for _ in range(9)
        ]
        cfg = SmoothingConfig(position_window=1, orientation_window=1, grip_window=1)
        out = retarget.smooth(traj, cfg)
        for a, b in zip(traj, out):
            assert np.array_equal(a.position, b.position)
            assert np.allclose(a.orientation, b.orientation, atol=1e-15)
            assert a.grip == b.grip

    def test_smoothed_quaternions_are_unit(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = rng.integers(1, 12)
            traj = [
                EEPose(np.zeros(3), geom.quat_normalize(rng.standard_normal(4)), 0.0, Side.LEFT)
                for _ in range(n)
            ]
            for p in retarget.smooth(traj):
                assert abs(np.linalg.norm(p.orientation) - 1.0) < 1e-9

    def test_position_envelope_never_grows(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            traj = [
                EEPose(rng.standard_normal(3), [1, 0, 0, 0], 0.0, Side.LEFT) for _ in range(11)
            ]
            pin = np.stack([p.position for p in traj])
            pout = np.stack([p.position for p in retarget.smooth(traj)])
            assert np.all(pout.min(axis=0) >= pin.min(axis=0) - 1e-12)
            assert np.all(pout.max(axis=0) <= pin.max(axis=0) + 1e-12)

    def test_mixed_sides_rejected(self):
        with pytest.raises(ValueError):
            retarget.smooth([_const_pose(0, Side.LEFT), _const_pose(1, Side.RIGHT)])

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            SmoothingConfig(position_window=4)
