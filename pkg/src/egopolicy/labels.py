"""Horizon-H 2D waypoint labels with camera-motion compensation.

For every frame t, each arm gets the sequence of its next H projected
gripper positions, all expressed in frame t's view: a future position is
projected with that future frame's camera and then warped back through the
homography from the future frame to frame t. Near the end of a clip the
final waypoint is repeated so label tensors stay rectangular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .retarget import EEPose, Side

SIDES = (Side.LEFT, Side.RIGHT)


class MissingHomography(Exception):
    """A required frame-to-frame mapping is absent and cannot be chained."""


@dataclass
class LabelConfig:
    horizon: int = 16
    normalize: bool = True
    sentinel: tuple[float, float] = (-1.0, -1.0)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.normalize and 0.0 <= self.sentinel[0] <= 1.0 and 0.0 <= self.sentinel[1] <= 1.0:
            raise ValueError("sentinel must lie outside the unit square")


@dataclass
class WaypointLabel:
    side: Side
    waypoints: np.ndarray  # (H+1, 2)
    valid: bool
    source_frame: int

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.valid and not np.all(np.isfinite(self.waypoints)):
            raise ValueError("valid label contains non-finite waypoints")


class HomographyLookup:
    """Frame-to-frame homographies with on-demand chaining.

    Stores maps keyed by (src_frame, dst_frame). A request for src -> dst
    with src >= dst falls back to composing the per-step maps
    (k -> k-1 for k in dst+1..src) when no direct entry exists.
    """

    def __init__(self, pairs: dict[tuple[int, int], geom.Homography] | None = None):
        self._pairs = dict(pairs or {})
        self._memo: dict[tuple[int, int], geom.Homography] = {}
        self._always_identity = False

    def add(self, src: int, dst: int, h: geom.Homography) -> None:
        self._pairs[(src, dst)] = h
        self._memo.clear()

    def get(self, src: int, dst: int) -> geom.Homography:
        if self._always_identity or src == dst:
            return geom.Homography.identity()
        if (src, dst) in self._pairs:
            return self._pairs[(src, dst)]
        if src < dst:
            raise MissingHomography(f"no mapping {src} -> {dst} (only backward chaining)")
        memo = self._memo.get((src, dst))
        if memo is not None:
            return memo
        # chain one per-step map onto the (memoized) remainder
        step = self._pairs.get((src, src - 1))
        if step is None:
            raise MissingHomography(f"no mapping {src} -> {dst}: missing step {src} -> {src - 1}")
        total = self.get(src - 1, dst).compose(step) if src - 1 != dst else step
        self._memo[(src, dst)] = total
        return total

    @classmethod
    def identity(cls) -> "HomographyLookup":
        """Static-camera lookup: every warp is the identity."""
        lut = cls()
        lut._always_identity = True
        return lut

    @classmethod
    def from_camera_track(
        cls,
        cams: list[geom.CameraModel],
        plane_normal_world,
        plane_offset_world: float,
    ) -> "HomographyLookup":
        """Per-step analytic homographies induced by a known scene plane."""
        lut = cls()
        for k in range(1, len(cams)):
            lut.add(k, k - 1, geom.plane_homography(cams[k], cams[k - 1], plane_normal_world, plane_offset_world))
        return lut


PosePair = tuple[EEPose | None, EEPose | None]


def apply_missing_hand_rules(
    presence: np.ndarray, ee_pairs: list[PosePair]
) -> tuple[list[PosePair], np.ndarray, tuple[bool, bool]]:
    """Patch per-frame pose pairs for hands that drop out of view.

    Rules, applied per hand:
      (a) seen earlier, missing now: reuse the pose from the last visible
          frame for all later frames;
      (b) never seen in the whole clip: flag the hand so the label stage
          emits its out-of-frame sentinel;
      (c) frames where both hands are missing with no earlier visible frame
          get a False keep flag (they carry no action signal at all).

    Returns (patched pairs, per-frame keep flags, per-hand sentinel flags).
    """
    presence = np.asarray(presence, dtype=bool).reshape(-1, 2)
    n = len(presence)
    if n != len(ee_pairs):
        raise ValueError("presence flags and trajectory have different lengths")

    patched: list[list[EEPose | None]] = [[None, None] for _ in range(n)]
    sentinel = [True, True]
    for s in range(2):
        last: EEPose | None = None
        for t in range(n):
            if presence[t, s] and ee_pairs[t][s] is not None:
                last = ee_pairs[t][s]
                sentinel[s] = False
            patched[t][s] = last

    keep = np.array([not (p[0] is None and p[1] is None) for p in patched], dtype=bool)
    return [tuple(p) for p in patched], keep, (sentinel[0], sentinel[1])


def make_labels(
    ee_pairs: list[PosePair],
    cams: list[geom.CameraModel],
    homographies: HomographyLookup,
    cfg: LabelConfig | None = None,
) -> list[tuple[WaypointLabel, WaypointLabel]]:
    """Build per-frame, per-arm waypoint label pairs for one clip.

    ``ee_pairs`` is the patched trajectory from apply_missing_hand_rules;
    a None pose yields a sentinel label with valid=False for that frame.
    Positions are world-frame; each future position t+k is projected with
    camera t+k and warped back into frame t's view.
    """
    cfg = cfg or LabelConfig()
    n = len(ee_pairs)
    if n != len(cams):
        raise ValueError("trajectory and camera track have different lengths")

    h = cfg.horizon
    out = []
    sentinel_wps = np.tile(np.asarray(cfg.sentinel, dtype=float), (h + 1, 1))
    for t in range(n):
        per_side = []
        for s, side in enumerate(SIDES):
            if ee_pairs[t][s] is None:
                per_side.append(WaypointLabel(side, sentinel_wps.copy(), False, t))
                continue
            wps = np.empty((h + 1, 2))
            for k in range(h + 1):
                tk = min(t + k, n - 1)
                pose = ee_pairs[tk][s]
                if pose is None:  # cannot happen after patching, but fail loudly
                    raise ValueError(f"frame {tk} side {side} has no pose inside the horizon")
                cam = cams[tk]
                pixel = geom.project(cam.world_to_camera(pose.position), cam)
                wps[k] = geom.warp(homographies.get(tk, t), pixel)
            if cfg.normalize:
                wps[:, 0] /= cams[t].width
                wps[:, 1] /= cams[t].height
            per_side.append(WaypointLabel(side, wps, True, t))
        out.append((per_side[0], per_side[1]))
    return out
