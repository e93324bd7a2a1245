"""Locally-consistent deformable convolution and motion in feature space, in numpy."""

from .deform import (
    deform_input,
    deformable_conv2d,
    expand_local_to_dense,
    lcdc_conv2d,
    offset_learner,
)
from .motion import check_flow_equivalence, energy_map, local_motion, receptive_field_diff
from .tensor import KernelSpec, bilinear_sample, conv2d, conv3d, sample_bilinear

__version__ = "0.1.0"

__all__ = [
    "KernelSpec",
    "bilinear_sample",
    "check_flow_equivalence",
    "conv2d",
    "conv3d",
    "deform_input",
    "deformable_conv2d",
    "energy_map",
    "expand_local_to_dense",
    "lcdc_conv2d",
    "local_motion",
    "offset_learner",
    "receptive_field_diff",
    "sample_bilinear",
]
