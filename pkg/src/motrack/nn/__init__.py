"""Autodiff micro-framework and the tracking network blocks."""

from .tensor import (
    Tensor,
    atan2,
    concat,
    huber,
    no_grad,
    softmax_cross_entropy,
    stack,
)
from .layers import FeatureNorm, Linear, PointMLP, VectorMLP, kaiming_uniform
from .nets import (
    M2Nets,
    Module,
    MVanillaNet,
    SegNet,
    Stage1Net,
    Stage2Net,
    load_arrays,
    load_checkpoint,
    save_arrays,
    save_checkpoint,
)
from .tboxes import (
    TBox,
    rot_z_apply,
    t_distance_map,
    t_rtm_between,
    t_to_canonical,
    t_transform_box,
    t_transform_points,
    wrap_t,
)

__all__ = [
    "Tensor", "atan2", "concat", "huber", "no_grad", "softmax_cross_entropy",
    "stack", "FeatureNorm", "Linear", "PointMLP", "VectorMLP", "kaiming_uniform",
    "M2Nets", "Module", "MVanillaNet", "SegNet", "Stage1Net", "Stage2Net",
    "load_arrays", "load_checkpoint", "save_arrays", "save_checkpoint",
    "TBox", "rot_z_apply", "t_distance_map", "t_rtm_between", "t_to_canonical",
    "t_transform_box", "t_transform_points", "wrap_t",
]
