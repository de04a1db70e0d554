"""Minimal float64 autodiff substrate used by the encoder, decoder and losses."""
from .nn import (
    MASK_NEG,
    AttnMask,
    attention,
    cross_entropy,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    masked_attention,
    rotate_pairs,
    softmax,
)
from .optim import Adam, RMSProp
from .params import ParamStore, grad_check
from .tensor import Tensor, add, as_tensor, concat, exp, log, matmul, mean, mul, reshape, take, transpose

__all__ = [
    "MASK_NEG", "Adam", "AttnMask", "ParamStore", "RMSProp", "Tensor", "add", "as_tensor", "attention",
    "concat", "cross_entropy", "exp", "gelu", "grad_check", "l2_normalize", "layer_norm",
    "linear", "log", "log_softmax", "masked_attention", "matmul", "mean", "mul", "reshape",
    "rotate_pairs", "softmax", "take", "transpose",
]
