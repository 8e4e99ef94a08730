"""Numpy tensor kernel: convolutions, blocks and parameter storage."""

from seqnas.kernel.blocks import init_op_params, op_backward, op_forward, op_param_shapes
from seqnas.kernel.ops import conv2d_backward, conv2d_forward, frame_softmax_ce
from seqnas.kernel.params import ParamStore, adadelta_step, load_checkpoint, save_checkpoint

__all__ = [
    "ParamStore",
    "adadelta_step",
    "conv2d_backward",
    "conv2d_forward",
    "frame_softmax_ce",
    "init_op_params",
    "load_checkpoint",
    "op_backward",
    "op_forward",
    "op_param_shapes",
    "save_checkpoint",
]
