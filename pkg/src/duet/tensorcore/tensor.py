"""Dense tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
Gradient arrays are never mutated in place, so closures may share them.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

# Finite stand-in for -inf inside kernels; anything at or below MASK_THRESHOLD
# is treated as masked.
NEG_INF = -1e9
MASK_THRESHOLD = NEG_INF / 2

_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def check_finite(enabled=True):
    """Validate every op output for NaN/Inf while active (debug mode)."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)) and not np.all(np.isfinite(arr) | np.isneginf(arr)):
            raise FloatingPointError("tensor data contains NaN or +inf")
        if requires_grad and not np.all(np.isfinite(arr)):
            raise FloatingPointError("parameter data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _acc(self, g):
        g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def backward(loss, grad=None):
    """Propagate d(loss)/d(x) into ``x.grad`` for every reachable leaf.

    Leaf gradients accumulate across calls; intermediate gradients are
    released once consumed.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grad = np.ones_like(loss.data)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("loss is not finite")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._acc(np.asarray(grad, dtype=loss.data.dtype))
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        node.grad = None
        if g is not None:
            node._backward(g)


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(-g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(g * b.data)
        if b.requires_grad:
            b._acc(g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._acc(g / b.data)
        if b.requires_grad:
            b._acc(-g * a.data / (b.data * b.data))

    return _node(a.data / b.data, (a, b), bw)


def exp(x):
    out = np.exp(x.data)

    def bw(g):
        x._acc(g * out)

    return _node(out, (x,), bw)


def log(x):
    def bw(g):
        x._acc(g / x.data)

    return _node(np.log(x.data), (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._acc(g * out * (1.0 - out))

    return _node(out, (x,), bw)


def tanh(x):
    out = np.tanh(x.data)

    def bw(g):
        x._acc(g * (1.0 - out * out))

    return _node(out, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        x._acc(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner))

    return _node(out, (x,), bw)


def masked_fill(x, mask, value=NEG_INF):
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data).astype(x.data.dtype, copy=False)

    def bw(g):
        x._acc(np.where(mask, 0.0, g))

    return _node(out, (x,), bw)


# -- shape ops ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            if a.requires_grad:
                a._acc(g * bd)
            if b.requires_grad:
                b._acc(g * ad)
            return
        if ad.ndim == 1:
            if a.requires_grad:
                a._acc(bd @ g)
            if b.requires_grad:
                b._acc(np.outer(ad, g))
            return
        if bd.ndim == 1:
            if a.requires_grad:
                a._acc(np.outer(g, bd))
            if b.requires_grad:
                b._acc(ad.T @ g)
            return
        if a.requires_grad:
            a._acc(g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            b._acc(np.swapaxes(ad, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), bw)


def reshape(x, shape):
    orig = x.data.shape

    def bw(g):
        x._acc(g.reshape(orig))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        x._acc(np.transpose(g, inv))

    return _node(np.transpose(x.data, axes), (x,), bw)


def tsum(x, axis=None, keepdims=False):
    shape = x.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, shape))

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def getitem(x, idx):
    shape = x.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        x._acc(full)

    return _node(x.data[idx], (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._acc(part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._acc(np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# -- normalisation and probabilities -----------------------------------


def _masked_softmax(z, axis=-1):
    masked = z <= MASK_THRESHOLD
    if np.any(np.all(masked, axis=axis)):
        raise ValueError("empty action set")
    zmax = np.max(np.where(masked, -np.inf, z), axis=axis, keepdims=True)
    e = np.where(masked, 0.0, np.exp(np.where(masked, 0.0, z - zmax)))
    return e / e.sum(axis=axis, keepdims=True), masked


def softmax(x, axis=-1):
    """Softmax where entries at or below the mask sentinel (or -inf) get exactly 0."""
    x = as_tensor(x)
    out, _ = _masked_softmax(x.data, axis)

    def bw(g):
        x._acc(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (x,), bw)


def log_softmax(x, axis=-1):
    """Log-softmax over unmasked entries; masked entries keep a very negative value."""
    x = as_tensor(x)
    p, masked = _masked_softmax(x.data, axis)
    zmax = np.max(np.where(masked, -np.inf, x.data), axis=axis, keepdims=True)
    lse = zmax + np.log(np.where(masked, 0.0, np.exp(np.where(masked, 0.0, x.data - zmax))).sum(axis=axis, keepdims=True))
    out = np.where(masked, NEG_INF, x.data - lse)

    def bw(g):
        g = np.where(masked, 0.0, g)
        x._acc(g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._acc((g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._acc(g.reshape(-1, xd.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._acc(inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _node(out, (x, gamma, beta), bw)


def linear(x, w, b=None):
    """``x @ w + b`` for a row vector or a matrix of rows."""
    x = as_tensor(x)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input width {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        xd = x.data
        if w.requires_grad:
            w._acc(np.outer(xd, g) if xd.ndim == 1 else xd.T @ g)
        if b is not None and b.requires_grad:
            b._acc(g if g.ndim == 1 else g.sum(axis=0))
        if x.requires_grad:
            x._acc(g @ w.data.T)

    return _node(out, parents, bw)


# -- attention kernel --------------------------------------------------


def _split_heads(a, heads):
    n, d = a.shape
    return a.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(a):
    h, n, dh = a.shape
    return a.transpose(1, 0, 2).reshape(n, h * dh)


def attention_probs(q, k, heads, bias=None):
    """Attention weights (heads, T, S) for projected queries/keys (numpy)."""
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(q.shape[1] // heads)
    if bias is not None:
        logits = logits + bias
    return _masked_softmax(logits)[0]


def attention(xq, xkv, wq, wk, wv, bq=None, bk=None, bv=None, bias=None, heads=1):
    """Multi-head scaled dot-product attention with an optional additive logit bias.

    ``bias`` broadcasts to (heads, T, S); entries at the mask sentinel are
    excluded from the softmax. Returns the concatenated head outputs (T, dv).
    """
    xq, xkv = as_tensor(xq), as_tensor(xkv)
    dq = wq.data.shape[1]
    for name, w, x in (("W_q", wq, xq), ("W_k", wk, xkv), ("W_v", wv, xkv)):
        if x.data.shape[-1] != w.data.shape[0]:
            raise ShapeError(f"attention: {name} expects width {w.data.shape[0]}, got {x.data.shape[-1]}")
    if wk.data.shape[1] != dq:
        raise ShapeError("attention: W_q and W_k output widths differ")
    if dq % heads or wv.data.shape[1] % heads:
        raise ShapeError(f"attention: width {dq} not divisible by {heads} heads")
    if bias is not None:
        bias = as_tensor(bias)
        t, s = xq.data.shape[0], xkv.data.shape[0]
        if bias.data.shape[-2:] != (t, s):
            raise ShapeError(f"attention bias shape {bias.data.shape} does not match ({t}, {s})")

    q = xq.data @ wq.data
    k = xkv.data @ wk.data
    v = xkv.data @ wv.data
    if bq is not None:
        q = q + bq.data
    if bk is not None:
        k = k + bk.data
    if bv is not None:
        v = v + bv.data
    scale = 1.0 / math.sqrt(dq // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    if bias is not None:
        logits = logits + bias.data
    probs, _ = _masked_softmax(logits)
    out = _merge_heads(probs @ vh)

    parents = [xq, xkv, wq, wk, wv]
    for extra in (bq, bk, bv, bias):
        if extra is not None:
            parents.append(extra)

    def bw(g):
        gh = _split_heads(g, heads)
        dprobs = gh @ vh.transpose(0, 2, 1)
        dvh = probs.transpose(0, 2, 1) @ gh
        dlog = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        if bias is not None and bias.requires_grad:
            bias._acc(dlog)
        dq_ = _merge_heads(dlog @ kh) * scale
        dk_ = _merge_heads(dlog.transpose(0, 2, 1) @ qh) * scale
        dv_ = _merge_heads(dvh)
        xqd, xkvd = xq.data, xkv.data
        if wq.requires_grad:
            wq._acc(xqd.T @ dq_)
        if wk.requires_grad:
            wk._acc(xkvd.T @ dk_)
        if wv.requires_grad:
            wv._acc(xkvd.T @ dv_)
        if bq is not None and bq.requires_grad:
            bq._acc(dq_.sum(axis=0))
        if bk is not None and bk.requires_grad:
            bk._acc(dk_.sum(axis=0))
        if bv is not None and bv.requires_grad:
            bv._acc(dv_.sum(axis=0))
        if xq.requires_grad:
            xq._acc(dq_ @ wq.data.T)
        if xkv.requires_grad:
            xkv._acc(dk_ @ wk.data.T + dv_ @ wv.data.T)

    return _node(out, tuple(parents), bw)


def sparse_matmul(a, x):
    """``a @ x`` for a constant scipy sparse matrix ``a`` and a dense tensor ``x``."""
    x = as_tensor(x)
    if a.shape[1] != x.data.shape[0]:
        raise ShapeError(f"sparse_matmul shape mismatch: {a.shape} @ {x.data.shape}")

    def bw(g):
        x._acc(np.asarray(a.T @ g))

    return _node(np.asarray(a @ x.data), (x,), bw)


def _gather_rows(a, index):
    """(S, L) row indices with -1 padding -> (S, L, d) with zero rows at padding."""
    valid = index >= 0
    return a[np.where(valid, index, 0)] * valid[..., None], valid


def segment_attention(xq, xkv, wq, wk, wv, bq=None, bk=None, bv=None, q_index=None, kv_index=None,
                      bias=None, heads=1):
    """Multi-head attention over many independent groups packed into row tables.

    Group s lets the ``xq`` rows listed in ``q_index[s]`` attend to the ``xkv``
    rows listed in ``kv_index[s]`` (both padded with -1). A query row may
    belong to one group at most; key rows can be shared between groups.
    ``bias`` broadcasts to (S, heads, Lq, Lk). Rows of ``xq`` outside every
    group get zero output.
    """
    xq, xkv = as_tensor(xq), as_tensor(xkv)
    q_index, kv_index = np.asarray(q_index), np.asarray(kv_index)
    dq, dv = wq.data.shape[1], wv.data.shape[1]
    if dq % heads or dv % heads:
        raise ShapeError(f"segment_attention: width {dq} not divisible by {heads} heads")
    flat_q = q_index[q_index >= 0]
    if len(np.unique(flat_q)) != len(flat_q):
        raise ValueError("segment_attention: a query row appears in more than one group")
    s, lq = q_index.shape
    if bias is not None:
        bias = as_tensor(bias)

    def proj(x, w, b):
        out = x.data @ w.data
        return out + b.data if b is not None else out

    q, k, v = proj(xq, wq, bq), proj(xkv, wk, bk), proj(xkv, wv, bv)
    qg, qvalid = _gather_rows(q, q_index)
    kg, kvalid = _gather_rows(k, kv_index)
    vg, _ = _gather_rows(v, kv_index)

    def split(a):
        n, l, d = a.shape
        return a.reshape(n, l, heads, d // heads).transpose(0, 2, 1, 3)

    def merge(a):
        n, h, l, d = a.shape
        return a.transpose(0, 2, 1, 3).reshape(n, l, h * d)

    scale = 1.0 / math.sqrt(dq // heads)
    qh, kh, vh = split(qg), split(kg), split(vg)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        logits = logits + bias.data
    logits = np.where(kvalid[:, None, None, :], logits, NEG_INF)
    probs, _ = _masked_softmax(logits)
    outg = merge(probs @ vh)
    out = np.zeros((xq.data.shape[0], dv), dtype=outg.dtype)
    out[q_index[qvalid]] = outg[qvalid]

    parents = [xq, xkv, wq, wk, wv]
    for extra in (bq, bk, bv, bias):
        if extra is not None:
            parents.append(extra)

    def bw(g):
        gg, _ = _gather_rows(g, q_index)
        gh = split(gg)
        dprobs = gh @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ gh
        dlog = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        if bias is not None and bias.requires_grad:
            bias._acc(dlog)
        dqg = merge(dlog @ kh) * scale
        dkg = merge(dlog.transpose(0, 1, 3, 2) @ qh) * scale
        dvg = merge(dvh)
        dq_ = np.zeros_like(q)
        dq_[q_index[qvalid]] = dqg[qvalid]
        dk_ = np.zeros_like(k)
        dv_ = np.zeros((k.shape[0], dv), dtype=k.dtype)
        rows = kv_index[kvalid]
        np.add.at(dk_, rows, dkg[kvalid])
        np.add.at(dv_, rows, dvg[kvalid])
        xqd, xkvd = xq.data, xkv.data
        if wq.requires_grad:
            wq._acc(xqd.T @ dq_)
        if wk.requires_grad:
            wk._acc(xkvd.T @ dk_)
        if wv.requires_grad:
            wv._acc(xkvd.T @ dv_)
        if bq is not None and bq.requires_grad:
            bq._acc(dq_.sum(axis=0))
        if bk is not None and bk.requires_grad:
            bk._acc(dk_.sum(axis=0))
        if bv is not None and bv.requires_grad:
            bv._acc(dv_.sum(axis=0))
        if xq.requires_grad:
            xq._acc(dq_ @ wq.data.T)
        if xkv.requires_grad:
            xkv._acc(dk_ @ wk.data.T + dv_ @ wv.data.T)

    return _node(out, tuple(parents), bw)
