"""Drop frames with excessive camera motion or unusable retargeted actions.

A frame survives only when the camera moved at most 5 cm and 0.5 rad since
the previous frame (strict comparison: motion exactly at the threshold is
kept), every hand pose present at the frame is finite and inside the
workspace sphere, and the frame was not already discarded by the
missing-hand rules. Drop reasons are assigned in a fixed priority order so
reports are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import PosePair

KEPT = "kept"
DROP_CAMERA_MOTION = "camera_motion"
DROP_INVALID_ACTION = "invalid_action"
DROP_BOTH_HANDS_MISSING = "both_hands_missing"


@dataclass
class FilterConfig:
    max_translation: float = 0.05  # meters per timestep
    max_rotation: float = 0.5  # radians per timestep
    workspace_radius: float = 1.0  # meters from the robot base origin
    require_finite: bool = True

    def __post_init__(self):
        if min(self.max_translation, self.max_rotation, self.workspace_radius) <= 0:
            raise ValueError("filter thresholds must be positive")


@dataclass
class FilterReport:
    total_frames: int = 0
    kept_frames: int = 0
    dropped_camera_motion: int = 0
    dropped_invalid_action: int = 0
    dropped_both_hands_missing: int = 0
    reasons: list[str] = field(default_factory=list)

    def check(self) -> None:
        dropped = (
            self.dropped_camera_motion
            + self.dropped_invalid_action
            + self.dropped_both_hands_missing
        )
        if self.kept_frames + dropped != self.total_frames:
            raise ValueError("filter report counts do not reconcile")

    def merge(self, other: "FilterReport") -> "FilterReport":
        return FilterReport(
            self.total_frames + other.total_frames,
            self.kept_frames + other.kept_frames,
            self.dropped_camera_motion + other.dropped_camera_motion,
            self.dropped_invalid_action + other.dropped_invalid_action,
            self.dropped_both_hands_missing + other.dropped_both_hands_missing,
            self.reasons + other.reasons,
        )

    def summary(self) -> str:
        lines = [
            f"frames total        {self.total_frames}",
            f"frames kept         {self.kept_frames}",
            f"dropped camera      {self.dropped_camera_motion}",
            f"dropped action      {self.dropped_invalid_action}",
            f"dropped no-hands    {self.dropped_both_hands_missing}",
        ]
        return "\n".join(lines)

    def to_record(self) -> dict[str, int]:
        return {
            "total": self.total_frames,
            "kept": self.kept_frames,
            "camera_motion": self.dropped_camera_motion,
            "invalid_action": self.dropped_invalid_action,
            "both_hands_missing": self.dropped_both_hands_missing,
        }

    @classmethod
    def from_record(cls, rec: dict[str, int]) -> "FilterReport":
        return cls(
            int(rec["total"]),
            int(rec["kept"]),
            int(rec["camera_motion"]),
            int(rec["invalid_action"]),
            int(rec["both_hands_missing"]),
        )


def _action_invalid(pair: PosePair, cfg: FilterConfig) -> bool:
    for pose in pair:
        if pose is None:
            continue
        p = pose.position
        if cfg.require_finite and not (np.all(np.isfinite(p)) and np.isfinite(pose.grip)):
            return True
        if float(np.linalg.norm(p)) > cfg.workspace_radius:
            return True
    return False


def filter_clip(
    motions: list[tuple[float, float]],
    ee_pairs: list[PosePair],
    keep_flags: np.ndarray,
    cfg: FilterConfig | None = None,
) -> tuple[list[int], FilterReport]:
    """Decide which frames of one clip survive.

    ``motions`` holds the per-step camera motion (translation m, rotation
    rad) between consecutive frames; step i describes the move into frame
    i+1, so frame 0 never fails the motion check. ``keep_flags`` comes from
    the missing-hand rules. Returns the retained frame indices and a report
    that categorizes every drop by its first matching reason: camera motion,
    then invalid action, then both hands missing.
    """
    cfg = cfg or FilterConfig()
    n = len(ee_pairs)
    if len(motions) != max(0, n - 1):
        raise ValueError(f"expected {max(0, n - 1)} per-step motions, got {len(motions)}")
    keep_flags = np.asarray(keep_flags, dtype=bool).reshape(n)

    retained = []
    report = FilterReport(total_frames=n)
    for t in range(n):
        if t > 0 and (motions[t - 1][0] > cfg.max_translation or motions[t - 1][1] > cfg.max_rotation):
            report.dropped_camera_motion += 1
            report.reasons.append(DROP_CAMERA_MOTION)
        elif _action_invalid(ee_pairs[t], cfg):
            report.dropped_invalid_action += 1
            report.reasons.append(DROP_INVALID_ACTION)
        elif not keep_flags[t]:
            report.dropped_both_hands_missing += 1
            report.reasons.append(DROP_BOTH_HANDS_MISSING)
        else:
            retained.append(t)
            report.kept_frames += 1
            report.reasons.append(KEPT)
    report.check()
    return retained, report
