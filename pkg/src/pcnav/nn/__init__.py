"""Differentiable-computation kernel: tape autodiff, layers, encoders,
and the recurrent navigation policy."""

from .autodiff import (Tensor, concat, gather_rows, grad_enabled, log_softmax,
                       minimum, no_grad, stack, take_along)
from .encoders import (DEPTH_BASELINE, MULTISCALE, POINTNET, VARIANTS,
                       EncoderConfig, encode, encode_depth_baseline,
                       encode_multiscale, encode_multiscale_batch,
                       encode_pointnet, farthest_point_indices, init_encoder,
                       knn_indices)
from .layers import (conv2d, gru_step, init_conv2d, init_gru, init_linear,
                     linear)
from .params import (Adam, CheckpointFormatError, ParamStore, orthogonal,
                     read_checkpoint, scaled_uniform, write_checkpoint)
from .policy import (NUM_ACTIONS, ActOutput, NavPolicy, PolicyConfig,
                     SequenceOutput, config_from_dict)

__all__ = [
    "Tensor", "concat", "gather_rows", "grad_enabled", "log_softmax",
    "minimum", "no_grad", "stack", "take_along",
    "DEPTH_BASELINE", "MULTISCALE", "POINTNET", "VARIANTS", "EncoderConfig",
    "encode", "encode_depth_baseline", "encode_multiscale",
    "encode_multiscale_batch", "encode_pointnet", "farthest_point_indices",
    "init_encoder", "knn_indices",
    "conv2d", "gru_step", "init_conv2d", "init_gru", "init_linear", "linear",
    "Adam", "CheckpointFormatError", "ParamStore", "orthogonal",
    "read_checkpoint", "scaled_uniform", "write_checkpoint",
    "NUM_ACTIONS", "ActOutput", "NavPolicy", "PolicyConfig", "SequenceOutput",
    "config_from_dict",
]
