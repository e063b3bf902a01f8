from uflow.flow.checkpoint import load_checkpoint, save_checkpoint
from uflow.flow.graph import (
    LatentPyramid,
    UFlowGraph,
    build_graph,
    stage_channels,
    uflow_forward,
    uflow_inverse,
    uflow_sample,
)
from uflow.flow.layers import LUFactors, actnorm, affine_coupling, inv_conv_1x1, invertible_upsample

__all__ = [
    "LUFactors",
    "LatentPyramid",
    "UFlowGraph",
    "actnorm",
    "affine_coupling",
    "build_graph",
    "inv_conv_1x1",
    "invertible_upsample",
    "load_checkpoint",
    "save_checkpoint",
    "stage_channels",
    "uflow_forward",
    "uflow_inverse",
    "uflow_sample",
]
