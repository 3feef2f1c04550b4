"""Layer-level operations built on the tensor kernels.

``params`` arguments are mappings holding tensors under the keys the
function documents (``W_q``, ``W_k``, ``W_v``, optional ``b_*``; ``W_1`` ...).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import NEG_INF, ShapeError, Tensor, as_tensor


def softmax(v):
    """Probability vector over the unmasked entries of ``v`` (numpy in, numpy out)."""
    v = np.asarray(v, dtype=np.float64)
    return T._masked_softmax(v)[0]


def _attn(xq, xkv, params, heads, bias):
    return T.attention(
        xq, xkv,
        params["W_q"], params["W_k"], params["W_v"],
        params.get("b_q"), params.get("b_k"), params.get("b_v"),
        bias=bias, heads=heads,
    )


def self_attention(x, params, heads=1):
    """Softmax(X W_q (X W_k)^T / sqrt(d)) X W_v, split over ``heads``."""
    return _attn(x, x, params, heads, None)


def gasa_attention(x, bias, params, heads=1):
    """Self-attention whose logits are shifted by the square bias matrix ``bias``.

    ``bias`` may be (K, K) shared by all heads or (heads, K, K).
    """
    x = as_tensor(x)
    k = x.shape[0]
    b = as_tensor(bias)
    if b.ndim not in (2, 3) or b.shape[-2:] != (k, k):
        raise ShapeError(f"GASA bias must be ({k}, {k}), got {b.shape}")
    return _attn(x, x, params, heads, b)


def cross_attention(q_tokens, kv_tokens, params, heads=1, bias=None):
    return _attn(q_tokens, kv_tokens, params, heads, bias)


def graph_bias(dist, w_e, b_e):
    """Per-head attention bias ``dist * w_e + b_e`` with shape (heads, K, K)."""
    dist = np.asarray(dist, dtype=w_e.data.dtype)
    h = w_e.shape[0]
    return T.add(T.mul(T.reshape(w_e, (h, 1, 1)), dist[None]), T.reshape(b_e, (h, 1, 1)))


def ffn(x, params):
    """W_2 . GELU(W_1 x + b_1) + b_2."""
    h = T.gelu(T.linear(x, params["W_1"], params["b_1"]))
    return T.linear(h, params["W_2"], params["b_2"])


def layer_norm(x, gamma, beta, eps=1e-5):
    return T.layer_norm(as_tensor(x), gamma, beta, eps)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")
    return T.getitem(table, ids)


def mean_pool(x):
    """Mean over rows of a (N, d) tensor."""
    x = as_tensor(x)
    if x.shape[0] == 0:
        raise ValueError("mean_pool of an empty set")
    return T.mean(x, axis=0)


def concat(tensors, axis=0):
    return T.concat(tensors, axis)


def sigmoid(x):
    return T.sigmoid(x)


def cross_entropy(logits, target):
    """-log softmax(logits)[target] for a 1-D logit vector."""
    logits = as_tensor(logits)
    n = logits.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"target index {target} out of range for {n} classes")
    if logits.data[target] <= T.MASK_THRESHOLD:
        raise ValueError(f"target index {target} is masked")
    return T.mul(T.getitem(T.log_softmax(logits), target), -1.0)


def kl_divergence(p_target, logits):
    """KL(p || softmax(logits)) = sum p (log p - log softmax(logits)); 0 log 0 = 0."""
    p = np.asarray(p_target, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("p_target is not a probability distribution")
    logits = as_tensor(logits)
    if p.shape != logits.shape:
        raise ShapeError(f"p_target shape {p.shape} != logits shape {logits.shape}")
    support = p > 0
    entropy_term = float(np.sum(p[support] * np.log(p[support])))
    cross = T.tsum(T.mul(T.log_softmax(logits), p.astype(logits.dtype)))
    return T.sub(Tensor(np.asarray(entropy_term, dtype=logits.dtype)), cross)


__all__ = [
    "NEG_INF", "softmax", "self_attention", "gasa_attention", "cross_attention",
    "graph_bias", "ffn", "layer_norm", "embedding_lookup", "mean_pool", "concat",
    "sigmoid", "cross_entropy", "kl_divergence",
]
