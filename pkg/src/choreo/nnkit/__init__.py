"""Minimal deterministic tensor/autodiff kernel.

Reverse-mode tape autodiff over numpy arrays, with exactly the layers,
initializer, optimizer, and losses the placement and selection models
need. Float32 storage with float64 accumulation in reductions; gradient
checks run in float64.
"""

from choreo.nnkit.autodiff import (
    DebugNanCheck,
    ShapeError,
    Tensor,
    add,
    backward,
    bce_mean,
    bce_with_logits_mean,
    concat,
    conv2d,
    dropout,
    exp,
    index_axis,
    log,
    lstm_step,
    matmul,
    maxpool_freq,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    softmax_cross_entropy,
    sub,
    tensor,
    tanh,
    total_sum,
)
from choreo.nnkit.layers import (
    LstmParams,
    conv_params,
    dense_params,
    glorot_init,
    init_lstm_params,
)
from choreo.nnkit.optim import SgdConfig, clip_and_step, global_grad_norm, zero_grad
from choreo.nnkit.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DebugNanCheck", "ShapeError", "Tensor", "add", "backward", "bce_mean",
    "bce_with_logits_mean", "concat", "conv2d", "dropout", "exp", "index_axis",
    "log", "lstm_step", "matmul", "maxpool_freq", "mean", "mul", "relu",
    "reshape", "scale", "sigmoid", "slice_axis", "softmax",
    "softmax_cross_entropy", "sub", "tensor", "tanh", "total_sum",
    "LstmParams", "conv_params", "dense_params", "glorot_init",
    "init_lstm_params",
    "SgdConfig", "clip_and_step", "global_grad_norm", "zero_grad",
    "load_checkpoint", "save_checkpoint",
]
