"""Dense tensor algebra, reverse-mode differentiation and attention."""

from .attention import AttentionSpec, attention_weights, init_attention_params, multi_head_attention
from .functional import (
    BatchNormNotReady,
    BatchNormState,
    batchnorm1d,
    conv1d,
    dropout,
    layer_norm,
    linear,
    matmul,
    softmax,
)
from .gradcheck import GradCheckReport, NonDeterministicError, grad_check, relative_error
from .tensor import Graph, ShapeError, Tensor, backward, concat, is_grad_enabled, no_grad, where_const

__all__ = [
    "AttentionSpec",
    "BatchNormNotReady",
    "BatchNormState",
    "GradCheckReport",
    "Graph",
    "NonDeterministicError",
    "ShapeError",
    "Tensor",
    "attention_weights",
    "backward",
    "batchnorm1d",
    "concat",
    "conv1d",
    "dropout",
    "grad_check",
    "init_attention_params",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "relative_error",
    "softmax",
    "where_const",
]
