"""Bundle-level pipeline stages: robotize, label, filter.

Stages operate on ClipBundle instances and can be chained; each returns a
new bundle (inputs are never mutated). Retargeting happens per frame in
camera coordinates, is lifted to the world frame with the known camera
pose, smoothed over contiguous visible runs, and then patched by the
missing-hand rules. Labels are generated from the patched world-frame
trajectory; filtering trims the keep mask and reports why frames fell.
"""

from __future__ import annotations

import copy

import numpy as np

from . import geom, labels as labelgen, retarget
from .data import ClipBundle, pack_ee_tracks, pack_labels
from .filtering import FilterConfig, FilterReport, filter_clip
from .labels import HomographyLookup, LabelConfig, MissingHomography
from .retarget import EEPose, Side, SmoothingConfig


def _visible_runs(flags: np.ndarray):
    run = []
    for t, on in enumerate(flags):
        if on:
            run.append(t)
        elif run:
            yield run
            run = []
    if run:
        yield run


def robotize_bundle(bundle: ClipBundle, smoothing: SmoothingConfig | None = None,
                    aperture_max: float = retarget.DEFAULT_APERTURE_M) -> ClipBundle:
    """Fit, smooth and patch gripper trajectories from hand keypoints."""
    if bundle.hands_points3d is None:
        raise ValueError(f"{bundle.clip_id}: no hand keypoints to retarget")
    cams = bundle.cameras()
    n = bundle.n_frames

    fitted: list[list[EEPose | None]] = [[None, None] for _ in range(n)]
    presence = bundle.presence.copy()
    for t in range(n):
        for s in range(2):
            hand = bundle.hand_at(t, s)
            if hand is None:
                continue
            try:
                cam_pose = retarget.fit_ee_pose(hand, aperture_max)
            except retarget.DegenerateHand:
                presence[t, s] = False  # unusable detection, treat as missing
                continue
            world = cams[t].pose.inverse()
            fitted[t][s] = EEPose(
                world.apply(cam_pose.position),
                geom.quat_mul(world.q, cam_pose.orientation),
                cam_pose.grip,
                cam_pose.side,
            )

    # smooth each hand over contiguous visible runs, in world coordinates
    for s in range(2):
        flags = np.array([fitted[t][s] is not None for t in range(n)])
        for run in _visible_runs(flags):
            smoothed = retarget.smooth([fitted[t][s] for t in run], smoothing)
            for t, pose in zip(run, smoothed):
                fitted[t][s] = pose

    pairs = [(row[0], row[1]) for row in fitted]
    patched, keep, sentinel = labelgen.apply_missing_hand_rules(presence, pairs)
    poses, valid = pack_ee_tracks(patched)

    out = copy.deepcopy(bundle)
    out.presence = presence
    out.ee_poses = poses
    out.ee_valid = valid
    out.sentinel = np.array(sentinel, dtype=bool)
    out.keep = bundle.keep & keep
    return out


def homographies_for(bundle: ClipBundle) -> HomographyLookup:
    """Motion-compensation maps for a clip.

    Uses the analytic plane-induced path when the bundle carries a scene
    plane; falls back to identities for a static camera track. A moving
    camera without a plane cannot be compensated from bundle data alone.
    """
    if bundle.plane is not None:
        return HomographyLookup.from_camera_track(
            bundle.cameras(), bundle.plane[:3], float(bundle.plane[3])
        )
    if np.all(bundle.camera_track == bundle.camera_track[0]):
        return HomographyLookup.identity()
    raise MissingHomography(
        f"{bundle.clip_id}: moving camera but no scene plane to induce homographies"
    )


def label_bundle(bundle: ClipBundle, cfg: LabelConfig | None = None) -> ClipBundle:
    """Attach horizon waypoint labels to a robotized bundle."""
    if bundle.ee_poses is None:
        raise ValueError(f"{bundle.clip_id}: robotize must run before labeling")
    cfg = cfg or LabelConfig()
    pairs = [bundle.ee_pair_at(t) for t in range(bundle.n_frames)]
    label_pairs = labelgen.make_labels(pairs, bundle.cameras(), homographies_for(bundle), cfg)
    wps, valid = pack_labels(label_pairs, cfg.horizon)
    out = copy.deepcopy(bundle)
    out.label_waypoints = wps
    out.label_valid = valid
    return out


def filter_bundle(bundle: ClipBundle, cfg: FilterConfig | None = None
                  ) -> tuple[ClipBundle, FilterReport]:
    """Apply the camera-motion and action-validity filter to one clip."""
    cams = bundle.cameras()
    motions = [
        geom.camera_motion(cams[i].pose, cams[i + 1].pose) for i in range(len(cams) - 1)
    ]
    pairs = [bundle.ee_pair_at(t) for t in range(bundle.n_frames)]
    retained, report = filter_clip(motions, pairs, bundle.keep, cfg)
    out = copy.deepcopy(bundle)
    out.keep = np.zeros(bundle.n_frames, dtype=bool)
    out.keep[retained] = True
    return out, report


def process_human_bundle(
    bundle: ClipBundle,
    smoothing: SmoothingConfig | None = None,
    label_cfg: LabelConfig | None = None,
    filter_cfg: FilterConfig | None = None,
) -> tuple[ClipBundle, FilterReport]:
    """Full pipeline for one raw human clip: robotize, label, filter."""
    out = robotize_bundle(bundle, smoothing)
    out = label_bundle(out, label_cfg)
    return filter_bundle(out, filter_cfg)
