"""Camera models, rigid transforms and homographies used by every pipeline stage.

Conventions:
  * quaternions are scalar-first (w, x, y, z) and unit norm
  * a camera pose maps world coordinates into the camera frame,
    p_cam = R @ p_world + t
  * pixel coordinates have their origin at the top-left corner, u right,
    v down, in pixels
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class BehindCamera(Exception):
    """Point has non-positive depth along the optical axis."""


class PointAtInfinity(Exception):
    """Projective warp produced a vanishing homogeneous coordinate."""


class DegenerateConfiguration(Exception):
    """Correspondences do not determine a homography."""


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if not math.isfinite(n) or n < 1e-12:
        raise ValueError(f"cannot normalize quaternion with norm {n}")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = float(np.linalg.norm(axis))
    if n < 1e-12:
        raise ValueError("rotation axis has zero norm")
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_angle(q: np.ndarray) -> float:
    """Shortest rotation angle of a unit quaternion, in [0, pi]."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * math.acos(w)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's branching for stability)."""
    m = np.asarray(m, dtype=float)
    t = float(np.trace(m))
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass
class RigidTransform:
    """Rotation (unit quaternion) plus translation, meters."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = quat_normalize(self.q)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.t)):
            raise ValueError("translation contains non-finite values")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_mat(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(quat_mul(self.q, other.q), self.rotation @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.q)
        return RigidTransform(qi, -(quat_to_mat(qi) @ self.t))


def look_at(eye, target, up_hint=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose for a camera at ``eye`` aimed at ``target``.

    ``up_hint`` fixes the roll; it must not be parallel to the viewing
    direction.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / nz
    x = np.cross(z, np.asarray(up_hint, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("up_hint is parallel to the viewing direction")
    x = x / nx
    r = np.stack([x, np.cross(z, x), z])
    return RigidTransform(mat_to_quat(r), -(r @ eye))


def camera_motion(prev_pose: RigidTransform, next_pose: RigidTransform) -> tuple[float, float]:
    """Magnitudes of the relative camera motion between two poses.

    Returns (translation in meters, rotation angle in radians). The rotation
    magnitude is the shortest, sign-free angle so callers can compare it
    against a threshold directly.
    """
    rel = next_pose.compose(prev_pose.inverse())
    return float(np.linalg.norm(rel.t)), quat_angle(rel.q)


# ---------------------------------------------------------------------------
# cameras


@dataclass
class CameraModel:
    """Pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.pose.apply(points)


def project(point: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Project a camera-frame point onto the image plane.

    The result may fall outside the image bounds; visibility is the
    caller's concern.
    """
    x, y, z = np.asarray(point, dtype=float)
    if z <= 1e-9:
        raise BehindCamera(f"depth {z} is not in front of the camera")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def unproject(pixel: np.ndarray, depth: float, cam: CameraModel) -> np.ndarray:
    """Back-project a pixel to the camera-frame point at the given depth."""
    if depth <= 1e-9:
        raise BehindCamera(f"depth {depth} is not in front of the camera")
    u, v = np.asarray(pixel, dtype=float)
    return np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])


# ---------------------------------------------------------------------------
# homographies


@dataclass
class Homography:
    """3x3 projective map between image planes, normalized so m[2,2] == 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(3, 3).copy()
        if not np.all(np.isfinite(m)):
            raise ValueError("homography contains non-finite entries")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] < 1e-14 * s[0]:
            raise DegenerateConfiguration("homography is not invertible")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self after other, as maps on pixels."""
        return Homography(self.m @ other.m)


def warp(h: Homography, p: np.ndarray) -> np.ndarray:
    """Apply a projective warp to a pixel, with de-homogenization."""
    u, v = np.asarray(p, dtype=float)
    q = h.m @ np.array([u, v, 1.0])
    if abs(q[2]) < 1e-12:
        raise PointAtInfinity(f"warp of {p} has homogeneous depth {q[2]}")
    return q[:2] / q[2]


def plane_homography(
    src_cam: CameraModel,
    dst_cam: CameraModel,
    plane_normal_world: np.ndarray,
    plane_offset_world: float,
) -> Homography:
    """Analytic homography induced by a world plane n.x = d between two cameras.

    Maps pixels of ``src_cam`` to pixels of ``dst_cam`` for points on the
    plane. Requires the plane not to pass through the source camera center.
    """
    n_w = np.asarray(plane_normal_world, dtype=float)
    n_w = n_w / np.linalg.norm(n_w)
    # plane in the source camera frame: n_c . p_cam = d_c
    r_src = src_cam.pose.rotation
    n_c = r_src @ n_w
    d_c = float(plane_offset_world) + float(n_c @ src_cam.pose.t)
    if abs(d_c) < 1e-9:
        raise DegenerateConfiguration("plane passes through the source camera center")
    rel = dst_cam.pose.compose(src_cam.pose.inverse())
    core = rel.rotation + np.outer(rel.t, n_c) / d_c
    k_src_inv = np.linalg.inv(src_cam.intrinsics)
    return Homography(dst_cam.intrinsics @ core @ k_src_inv)


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.linalg.norm(pts - c, axis=1).mean()
    if d < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform; src/dst are (N, 2), N >= 4."""
    sn, ts = _hartley_normalization(src)
    dn, td = _hartley_normalization(dst)
    n = len(sn)
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2] = np.column_stack([x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u])
    a[1::2] = np.column_stack([np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v])
    _, sv, vt = np.linalg.svd(a)
    # a one-dimensional null space needs rank 8
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateConfiguration("design matrix is rank-deficient")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateConfiguration("estimated homography is not normalizable")
    return h / h[2, 2]


def _transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ph = np.column_stack([src, np.ones(len(src))]) @ h.T
    w = ph[:, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    proj = ph[:, :2] / w[:, None]
    err = np.linalg.norm(proj - dst, axis=1)
    return np.where(bad, np.inf, err)


def estimate_homography(
    src,
    dst,
    *,
    ransac: bool = False,
    inlier_threshold: float = 2.0,
    confidence: float = 0.999,
    max_iters: int = 2000,
    rng: np.random.Generator | int | None = None,
) -> Homography:
    """Estimate the homography mapping src pixels to dst pixels.

    Plain normalized DLT by default (least squares over all points). With
    ``ransac=True`` and more than 4 correspondences, runs an adaptive
    RANSAC loop (success probability ``confidence``, at most ``max_iters``
    minimal samples) and refits on the consensus inliers.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape or len(src) < 4:
        raise ValueError("need at least 4 matched correspondences")

    if not ransac or len(src) == 4:
        return Homography(_dlt(src, dst))

    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = len(src)
    best_inliers = None
    best_count = -1
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = gen.choice(n, size=4, replace=False)
        try:
            h = _dlt(src[idx], dst[idx])
        except DegenerateConfiguration:
            continue
        inliers = _transfer_errors(h, src, dst) < inlier_threshold
        count = int(inliers.sum())
        if count > best_count and count >= 4:
            best_count = count
            best_inliers = inliers
            w = count / n
            if w > 0:
                denom = math.log(max(1e-12, 1.0 - w**4))
                if denom < 0:
                    needed = min(max_iters, int(math.ceil(math.log(1.0 - confidence) / denom)))
    if best_inliers is None:
        raise DegenerateConfiguration("no valid minimal sample found")
    return Homography(_dlt(src[best_inliers], dst[best_inliers]))
