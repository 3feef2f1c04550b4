"""Minimal dense tensor engine: reverse-mode autodiff, layers, AdamW."""

from .tensor import (
    NEG_INF,
    MASK_THRESHOLD,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    check_finite,
    no_grad,
)
from . import tensor as ops
from .functional import (
    concat,
    cross_attention,
    cross_entropy,
    embedding_lookup,
    ffn,
    gasa_attention,
    graph_bias,
    kl_divergence,
    layer_norm,
    mean_pool,
    self_attention,
    sigmoid,
    softmax,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import AdamW, optimizer_step
from .params import ParamStore

__all__ = [
    "NEG_INF", "MASK_THRESHOLD", "ShapeError", "Tensor", "as_tensor", "backward",
    "check_finite", "no_grad", "ops", "concat", "cross_attention", "cross_entropy",
    "embedding_lookup", "ffn", "gasa_attention", "graph_bias", "kl_divergence",
    "layer_norm", "mean_pool", "self_attention", "sigmoid", "softmax",
    "check_gradients", "numeric_grad", "relative_error", "AdamW", "optimizer_step",
    "ParamStore",
]
