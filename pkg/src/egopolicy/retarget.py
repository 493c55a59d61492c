"""Map 21-keypoint hand observations to gripper poses and smooth trajectories.

The keypoint layout follows the common 21-landmark anatomical ordering:
index 0 is the wrist, 4 the thumb tip, 8 the index fingertip. A parallel-jaw
gripper pose is built from those three landmarks alone: the grasp point sits
midway between thumb and index tips, the approach axis points from the wrist
through the grasp point, and the jaw closing axis follows the thumb-to-index
direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import geom

WRIST = 0
THUMB_TIP = 4
INDEX_TIP = 8

#: Stroke of a 85 mm parallel-jaw gripper, used to normalize grip width.
DEFAULT_APERTURE_M = 0.085


class DegenerateHand(Exception):
    """Thumb/index midpoint coincides with the wrist; no approach axis."""


class EmptyTrajectory(Exception):
    """Smoothing was asked to run on a zero-length trajectory."""


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass
class HandKeypoints21:
    """One hand observation: 21 camera-frame 3D points plus their pixels."""

    points: np.ndarray  # (21, 3) meters, camera frame
    points2d: np.ndarray  # (21, 2) pixels
    confidence: float
    side: Side

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(21, 3)
        self.points2d = np.asarray(self.points2d, dtype=float).reshape(21, 2)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class EEPose:
    """End-effector state: position, orientation and normalized grip width."""

    position: np.ndarray  # (3,) meters
    orientation: np.ndarray  # (4,) unit quaternion, scalar first
    grip: float  # in [0, 1]
    side: Side

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = geom.quat_normalize(self.orientation)
        if not 0.0 <= self.grip <= 1.0:
            raise ValueError(f"grip {self.grip} outside [0, 1]")


@dataclass
class SmoothingConfig:
    position_window: int = 5
    orientation_window: int = 5
    grip_window: int = 3

    def __post_init__(self):
        for name in ("position_window", "orientation_window", "grip_window"):
            w = getattr(self, name)
            if w < 1 or w % 2 == 0:
                raise ValueError(f"{name} must be an odd integer >= 1, got {w}")


def _orthonormal_to(axis: np.ndarray) -> np.ndarray:
    # deterministic fallback direction: smallest-component basis vector,
    # projected orthogonal to axis
    e = np.zeros(3)
    e[int(np.argmin(np.abs(axis)))] = 1.0
    v = e - (e @ axis) * axis
    return v / np.linalg.norm(v)


def fit_ee_pose(hand: HandKeypoints21, aperture_max: float = DEFAULT_APERTURE_M) -> EEPose:
    """Fit a parallel-jaw gripper pose to one hand observation.

    Raises DegenerateHand when the thumb/index midpoint coincides with the
    wrist, in which case the caller should mark the frame invalid.
    """
    if aperture_max <= 0:
        raise ValueError("aperture_max must be positive")
    pts = hand.points
    if not np.all(np.isfinite(pts)):
        raise ValueError("hand keypoints contain non-finite values")

    thumb, index, wrist = pts[THUMB_TIP], pts[INDEX_TIP], pts[WRIST]
    position = 0.5 * (thumb + index)
    width = float(np.linalg.norm(thumb - index))
    grip = min(1.0, max(0.0, width / aperture_max))

    approach = position - wrist
    norm = float(np.linalg.norm(approach))
    if norm < 1e-6:
        raise DegenerateHand("grasp point coincides with the wrist")
    approach = approach / norm

    closing = index - thumb
    closing = closing - (closing @ approach) * approach
    cn = float(np.linalg.norm(closing))
    if cn < 1e-9:
        # jaws fully shut or aligned with the approach axis: any orthogonal
        # direction is as good, pick one deterministically
        closing = _orthonormal_to(approach)
    else:
        closing = closing / cn

    r = np.column_stack([approach, closing, np.cross(approach, closing)])
    return EEPose(position, geom.mat_to_quat(r), grip, hand.side)


def _window_bounds(i: int, n: int, window: int) -> tuple[int, int]:
    # symmetric shrink at the borders keeps the window centered
    half = min(window // 2, i, n - 1 - i)
    return i - half, i + half + 1


def smooth(traj: list[EEPose], cfg: SmoothingConfig | None = None) -> list[EEPose]:
    """Centered moving average over a pose trajectory.

    Positions and grips use plain means; orientations use the normalized
    component mean after sign-aligning every quaternion in the window with
    the window center. Windows shrink symmetrically near the borders, so
    output length always equals input length.
    """
    cfg = cfg or SmoothingConfig()
    n = len(traj)
    if n == 0:
        raise EmptyTrajectory("cannot smooth an empty trajectory")
    sides = {p.side for p in traj}
    if len(sides) > 1:
        raise ValueError("trajectory mixes hand sides")

    pos = np.stack([p.position for p in traj])
    quat = np.stack([p.orientation for p in traj])
    grip = np.array([p.grip for p in traj])

    out = []
    for i in range(n):
        lo, hi = _window_bounds(i, n, cfg.position_window)
        p = pos[lo:hi].mean(axis=0)

        lo, hi = _window_bounds(i, n, cfg.grip_window)
        g = float(grip[lo:hi].mean())

        lo, hi = _window_bounds(i, n, cfg.orientation_window)
        qs = quat[lo:hi].copy()
        signs = np.where(qs @ quat[i] < 0.0, -1.0, 1.0)
        q = geom.quat_normalize((qs * signs[:, None]).mean(axis=0))

        out.append(EEPose(p, q, g, traj[i].side))
    return out
