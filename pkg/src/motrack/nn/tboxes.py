"""Box and rigid-motion algebra on autodiff tensors.

Mirrors the numpy routines in motrack.geom so that losses can differentiate
through box compositions (motion application, canonicalization, the backward
pass of the cycle consistency). Sizes stay plain arrays: they are never
regressed. In-graph yaw wrapping uses atan2(sin, cos), whose derivative is 1
everywhere except the branch point.
"""

from __future__ import annotations

import numpy as np

from ..geom import Box3D
from .tensor import Tensor, atan2, concat, stack


class TBox:
    """Differentiable box: center Tensor (3,), yaw Tensor scalar, fixed size."""

    def __init__(self, center, yaw, size):
        self.center = center if isinstance(center, Tensor) else Tensor(center)
        self.yaw = yaw if isinstance(yaw, Tensor) else Tensor(yaw)
        self.size = np.asarray(size, dtype=np.float64).reshape(3)

    @staticmethod
    def from_box(box: Box3D) -> "TBox":
        return TBox(Tensor(box.center), Tensor(box.yaw), box.size)

    def to_box(self) -> Box3D:
        return Box3D(self.center.data.copy(), float(self.yaw.data), self.size.copy())


def rot_z_apply(yaw: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors (..., 3) about z by a scalar yaw tensor."""
    c, s = yaw.cos(), yaw.sin()
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return stack([c * x - s * y, s * x + c * y, z], axis=-1)


def wrap_t(angle: Tensor) -> Tensor:
    return atan2(angle.sin(), angle.cos())


def t_transform_box(box: TBox, rtm: Tensor) -> TBox:
    """Apply an RTM tensor (4,) expressed in the box's canonical frame."""
    shift = rot_z_apply(box.yaw, rtm[:3].reshape(1, 3))[0]
    return TBox(box.center + shift, wrap_t(box.yaw + rtm[3]), box.size)


def t_transform_points(points: Tensor, anchor: TBox, rtm: Tensor) -> Tensor:
    """Move points (N, 3) rigidly with the anchor box under an RTM tensor."""
    centered = points - anchor.center.reshape(1, 3)
    turned = rot_z_apply(rtm[3], centered)
    shift = rot_z_apply(anchor.yaw, rtm[:3].reshape(1, 3))
    return turned + anchor.center.reshape(1, 3) + shift


def t_rtm_between(a: TBox, b: TBox) -> Tensor:
    """RTM tensor (4,) carrying box a onto box b, in a's canonical frame."""
    delta = (b.center - a.center).reshape(1, 3)
    local = rot_z_apply(-a.yaw, delta)[0]
    dyaw = wrap_t(b.yaw - a.yaw)
    return concat([local, dyaw.reshape(1)], axis=0)


def t_to_canonical(points: Tensor, box: TBox) -> Tensor:
    """Map points (N, 3) into the box's canonical frame."""
    return rot_z_apply(-box.yaw, points - box.center.reshape(1, 3))


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
        [0, 0, 0],
    ],
    dtype=np.float64,
)


def t_distance_map(points: Tensor, box: TBox) -> Tensor:
    """Distances (N, 9) to the box keypoints, differentiable in points and box."""
    offsets = Tensor(0.5 * _CORNER_SIGNS * box.size)  # (9, 3) canonical
    kps = rot_z_apply(box.yaw, offsets) + box.center.reshape(1, 3)
    diff = points.reshape(-1, 1, 3) - kps.reshape(1, 9, 3)
    return ((diff * diff).sum(axis=-1) + 1e-12).sqrt()
