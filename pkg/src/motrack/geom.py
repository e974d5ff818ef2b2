"""Yaw-only rigid motion algebra and oriented 3D box geometry.

Conventions used across the package:
  * right-handed world frame, z up
  * a box is (center, yaw, size) with size = (width, length, height);
    in the box's canonical frame x spans the width, y the length, z the
    height, and the origin sits at the volumetric center
  * a relative target motion (RTM) is a 4-vector (dx, dy, dz, dtheta)
    expressed in the canonical frame of its anchor box
  * yaw angles are wrapped to (-pi, pi]

All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.asarray(a, dtype=np.float64) - TWO_PI * np.ceil(
        (np.asarray(a, dtype=np.float64) - np.pi) / TWO_PI
    )


def rot_z(theta: float) -> np.ndarray:
    """3x3 rotation about the z axis."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class RTM4:
    """Relative target motion: translation in the anchor frame plus a yaw delta."""

    dx: float
    dy: float
    dz: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dtheta])

    @staticmethod
    def from_array(v) -> "RTM4":
        v = np.asarray(v, dtype=np.float64)
        return RTM4(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    @staticmethod
    def identity() -> "RTM4":
        return RTM4(0.0, 0.0, 0.0, 0.0)


@dataclass(eq=False)
class Box3D:
    """Oriented box: volumetric center, yaw about z, size (width, length, height)."""

    center: np.ndarray
    yaw: float
    size: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)

    def copy(self) -> "Box3D":
        return Box3D(self.center.copy(), self.yaw, self.size.copy())

    def volume(self) -> float:
        return float(np.prod(self.size))


def rtm_to_matrix(rtm: RTM4) -> np.ndarray:
    """Homogeneous 4x4 transform for an RTM (rotation about z, then translation)."""
    m = np.eye(4)
    m[:3, :3] = rot_z(rtm.dtheta)
    m[:3, 3] = (rtm.dx, rtm.dy, rtm.dz)
    return m


def box_pose_matrix(box: Box3D) -> np.ndarray:
    """Homogeneous 4x4 canonical-to-world transform of a box."""
    m = np.eye(4)
    m[:3, :3] = rot_z(box.yaw)
    m[:3, 3] = box.center
    return m


def to_canonical(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Map world points (N, 3) into the box's canonical frame."""
    p = np.asarray(points, dtype=np.float64)
    return (p - box.center) @ rot_z(box.yaw)  # right-multiply == R^T on the left


def from_canonical(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Map canonical-frame points (N, 3) back to the world frame."""
    p = np.asarray(points, dtype=np.float64)
    return p @ rot_z(box.yaw).T + box.center


def transform_box(box: Box3D, rtm: RTM4) -> Box3D:
    """Apply an RTM expressed in the box's own canonical frame.

    The center moves by the translation rotated into the world frame, the yaw
    accumulates the delta, the size is untouched (rigid targets).
    """
    center = box.center + rot_z(box.yaw) @ np.array([rtm.dx, rtm.dy, rtm.dz])
    return Box3D(center, wrap_angle(box.yaw + rtm.dtheta), box.size.copy())


def transform_points(points: np.ndarray, anchor: Box3D, rtm: RTM4) -> np.ndarray:
    """Move world points (N, 3) rigidly with the anchor box under an RTM.

    This is the conjugated motion pose(anchor) @ T(rtm) @ pose(anchor)^-1. For
    z-only rotations it collapses to a rotation by dtheta about the anchor
    center plus the world-frame translation R_z(yaw) @ (dx, dy, dz).
    """
    p = np.asarray(points, dtype=np.float64)
    shift = rot_z(anchor.yaw) @ np.array([rtm.dx, rtm.dy, rtm.dz])
    return (p - anchor.center) @ rot_z(rtm.dtheta).T + anchor.center + shift


def transform_point(point: np.ndarray, anchor: Box3D, rtm: RTM4) -> np.ndarray:
    """Single-point convenience wrapper around transform_points."""
    return transform_points(np.asarray(point, dtype=np.float64)[None, :], anchor, rtm)[0]


def rtm_between(a: Box3D, b: Box3D) -> RTM4:
    """RTM that carries box a onto box b, expressed in a's canonical frame."""
    dt = rot_z(a.yaw).T @ (b.center - a.center)
    return RTM4(dt[0], dt[1], dt[2], float(wrap_angle(b.yaw - a.yaw)))


# ---------------------------------------------------------------------------
# membership, corners, box-aware keypoints

def points_in_box(points: np.ndarray, box: Box3D, scale: float = 1.0) -> np.ndarray:
    """Boolean mask of points inside the box, with an optional size scale.

    Boundary points count as inside (closed box).
    """
    half = 0.5 * scale * box.size
    canon = to_canonical(points, box)
    return np.all(np.abs(canon) <= half, axis=-1)


# canonical corner offsets, ordered by sign pattern over (z, y, x):
# (-,-,-) (-,-,+) (-,+,-) (-,+,+) (+,-,-) (+,-,+) (+,+,-) (+,+,+)
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [-1, +1, -1],
        [+1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [-1, +1, +1],
        [+1, +1, +1],
    ],
    dtype=np.float64,
)


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners (8, 3) in world coordinates, bottom four first."""
    offsets = 0.5 * _CORNER_SIGNS * box.size
    return from_canonical(offsets, box)


def box_keypoints(box: Box3D) -> np.ndarray:
    """The 8 corners followed by the center: (9, 3) world coordinates."""
    return np.vstack([box_corners(box), box.center[None, :]])


def distance_map(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Per-point Euclidean distances (N, 9) to the box keypoints."""
    p = np.asarray(points, dtype=np.float64)
    kp = box_keypoints(box)
    return np.linalg.norm(p[:, None, :] - kp[None, :, :], axis=-1)


# ---------------------------------------------------------------------------
# overlap and error metrics

def _bev_polygon(box: Box3D) -> np.ndarray:
    """Counter-clockwise footprint (4, 2) of the box in the xy plane."""
    w, l = box.size[0], box.size[1]
    local = np.array(
        [[-w / 2, -l / 2], [w / 2, -l / 2], [w / 2, l / 2], [-w / 2, l / 2]]
    )
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon; positive when counter-clockwise."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW clipper."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        inputs, output = output, []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in inputs:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                # denom == 0 cannot coincide with a sidedness change
                t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(output) if output else np.zeros((0, 2))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two yaw-only oriented boxes.

    BEV overlap via polygon clipping, extruded by the z-extent overlap.
    """
    inter_poly = _clip_polygon(_bev_polygon(a), _bev_polygon(b))
    bev_inter = abs(_polygon_area(inter_poly))
    z_lo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    z_hi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    inter = bev_inter * max(0.0, z_hi - z_lo)
    # clipping noise on (near-)identical footprints can overshoot the exact
    # area; the intersection can never exceed either volume
    inter = min(inter, a.volume(), b.volume())
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def center_error(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between the two box centers."""
    return float(np.linalg.norm(a.center - b.center))
