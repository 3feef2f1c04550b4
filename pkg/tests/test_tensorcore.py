import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duet.tensorcore import (
    NEG_INF,
    AdamW,
    ParamStore,
    ShapeError,
    Tensor,
    check_finite,
    check_gradients,
    cross_entropy,
    gasa_attention,
    graph_bias,
    kl_divergence,
    no_grad,
    ops,
    optimizer_step,
    relative_error,
    self_attention,
    softmax,
)


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


# -- elementwise and shape ops --------------------------------------------------


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: ops.tsum(ops.mul(ops.add(a, b), ops.sub(a, b))),
        lambda a, b: ops.tsum(ops.div(a, ops.add(ops.exp(b), 1.0))),
        lambda a, b: ops.tsum(ops.gelu(a) * ops.tanh(b)),
        lambda a, b: ops.tsum(ops.sigmoid(ops.matmul(a, ops.transpose(b)))),
        lambda a, b: ops.tsum(ops.log(ops.add(ops.exp(a), ops.exp(b)))),
        lambda a, b: ops.mean(ops.concat([a, b], axis=1)),
        lambda a, b: ops.tsum(ops.stack([a, b], axis=0)[1] * a),
        lambda a, b: ops.tsum(ops.reshape(a, (-1,))[::2] * 3.0),
    ],
)
def test_elementwise_gradients(fn):
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    report = check_gradients(lambda: fn(a, b), {"a": a, "b": b})
    assert report.ok(1e-6), report.per_param


def test_broadcast_gradient_reduces_to_input_shape():
    rng = np.random.default_rng(2)
    x, b = rand(rng, 5, 3), rand(rng, 3)
    ops.tsum(ops.mul(ops.add(x, b), ops.add(x, b))).backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, 2 * (x.data + b.data).sum(axis=0))


def test_getitem_with_repeated_indices_accumulates():
    x = leaf(np.arange(4.0))
    ops.tsum(ops.getitem(x, np.array([1, 1, 3]))).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_layer_norm_and_linear_gradients():
    rng = np.random.default_rng(3)
    x, w, b = rand(rng, 4, 6), rand(rng, 6, 5), rand(rng, 5)
    g, beta = leaf(1 + 0.1 * rng.standard_normal(5)), rand(rng, 5)
    f = lambda: ops.tsum(ops.gelu(ops.layer_norm(ops.linear(x, w, b), g, beta)) * np.arange(20.0).reshape(4, 5))
    assert check_gradients(f, {"x": x, "w": w, "b": b, "g": g, "beta": beta}).ok(1e-6)


def test_log_softmax_masked_entries():
    z = leaf([1.0, NEG_INF, 2.0, 0.5])
    out = ops.log_softmax(z)
    p = np.exp(out.data[[0, 2, 3]])
    assert out.data[1] <= NEG_INF
    assert abs(p.sum() - 1.0) < 1e-12
    ops.tsum(ops.mul(out, np.array([1.0, 0.0, -2.0, 0.5]))).backward()
    assert z.grad[1] == 0.0


def test_softmax_all_masked_raises():
    with pytest.raises(ValueError, match="empty action set"):
        softmax(np.array([NEG_INF, NEG_INF]))


def test_softmax_example():
    np.testing.assert_allclose(softmax([0.0, np.log(3.0)]), [0.25, 0.75])
    np.testing.assert_array_equal(softmax([0.0, -np.inf, 0.0]), [0.5, 0.0, 0.5])


# -- attention ------------------------------------------------------------------


def attn_params(rng, d, heads=2, bias=True):
    p = {f"W_{c}": rand(rng, d, d) for c in "qkv"}
    if bias:
        p.update({f"b_{c}": rand(rng, d) for c in "qkv"})
    return p


def brute_attention(x, kv, p, heads, bias=None):
    q = x @ p["W_q"].data + p["b_q"].data
    k = kv @ p["W_k"].data + p["b_k"].data
    v = kv @ p["W_v"].data + p["b_v"].data
    dh = q.shape[1] // heads
    out = np.zeros((x.shape[0], q.shape[1]))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(x.shape[0]):
            logits = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(kv.shape[0])])
            if bias is not None:
                logits = logits + (bias[h, i] if bias.ndim == 3 else bias[i])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = w @ v[:, sl]
    return out


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), m=st.integers(1, 6), heads=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**31))
def test_attention_matches_brute_force(n, m, heads, seed):
    rng = np.random.default_rng(seed)
    p = attn_params(rng, 8)
    x, kv = rng.standard_normal((n, 8)), rng.standard_normal((m, 8))
    out = ops.attention(x, kv, p["W_q"], p["W_k"], p["W_v"], p["b_q"], p["b_k"], p["b_v"], heads=heads)
    np.testing.assert_allclose(out.data, brute_attention(x, kv, p, heads), atol=1e-12)


def test_attention_gradients_with_bias():
    rng = np.random.default_rng(4)
    p = attn_params(rng, 6, bias=True)
    x, kv, bias = rand(rng, 3, 6), rand(rng, 5, 6), rand(rng, 2, 3, 5)
    f = lambda: ops.tsum(ops.tanh(ops.attention(x, kv, *[p[f"W_{c}"] for c in "qkv"],
                                                 *[p[f"b_{c}"] for c in "qkv"], bias=bias, heads=2)))
    assert check_gradients(f, {"x": x, "kv": kv, "bias": bias, **p}).ok(1e-6)


def test_attention_respects_mask_sentinel():
    rng = np.random.default_rng(5)
    p = attn_params(rng, 4, heads=1)
    x = rng.standard_normal((2, 4))
    kv = rng.standard_normal((3, 4))
    bias = np.array([[0.0, NEG_INF, 0.0]] * 2)
    masked = ops.attention(x, kv, p["W_q"], p["W_k"], p["W_v"], p["b_q"], p["b_k"], p["b_v"], bias=bias)
    kept = ops.attention(x, kv[[0, 2]], p["W_q"], p["W_k"], p["W_v"], p["b_q"], p["b_k"], p["b_v"])
    np.testing.assert_allclose(masked.data, kept.data, atol=1e-12)


def test_attention_shape_error_names_projection():
    rng = np.random.default_rng(6)
    p = attn_params(rng, 4)
    with pytest.raises(ShapeError, match="W_k"):
        ops.attention(rng.standard_normal((2, 4)), rng.standard_normal((2, 5)), p["W_q"], p["W_k"], p["W_v"])


def test_gasa_bias_zero_equals_plain_attention():
    rng = np.random.default_rng(7)
    p = attn_params(rng, 8)
    x = rand(rng, 5, 8)
    w_e, b_e = leaf(np.zeros(2)), leaf(np.zeros(2))
    dist = rng.uniform(0, 10, (5, 5))
    a = gasa_attention(x, graph_bias(dist, w_e, b_e), p, heads=2)
    b = self_attention(x, p, heads=2)
    np.testing.assert_array_equal(a.data, b.data)


def test_gasa_bias_shape_checked():
    rng = np.random.default_rng(8)
    with pytest.raises(ShapeError):
        gasa_attention(rand(rng, 3, 4), np.zeros((4, 4)), attn_params(rng, 4), heads=1)


def test_graph_bias_gradients():
    rng = np.random.default_rng(9)
    p = attn_params(rng, 4)
    x = rand(rng, 4, 4)
    w_e, b_e = rand(rng, 2), rand(rng, 2)
    dist = rng.uniform(0, 5, (4, 4))
    f = lambda: ops.tsum(ops.tanh(gasa_attention(x, graph_bias(dist, w_e, b_e), p, heads=2)))
    assert check_gradients(f, {"w_e": w_e, "b_e": b_e, "x": x}).ok(1e-6)


# -- losses ------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert abs(float(cross_entropy(leaf([0.0, 0.0, 0.0, 0.0]), 2).data) - np.log(4)) < 1e-12
    with pytest.raises(IndexError):
        cross_entropy(leaf([0.0, 1.0]), 2)
    with pytest.raises(ValueError, match="masked"):
        cross_entropy(leaf([0.0, NEG_INF]), 1)


def test_kl_divergence_examples():
    z = leaf([0.3, -1.0, 2.0])
    p = softmax(z.data)
    assert abs(float(kl_divergence(p, z).data)) < 1e-12
    onehot = np.array([0.0, 1.0, 0.0])
    assert abs(float(kl_divergence(onehot, z).data) + np.log(p[1])) < 1e-12
    with pytest.raises(ValueError):
        kl_divergence(np.array([0.5, 0.6, 0.0]), z)


def test_loss_gradients():
    rng = np.random.default_rng(10)
    z = rand(rng, 5)
    assert check_gradients(lambda: cross_entropy(z, 3), {"z": z}).ok(1e-7)
    q = rng.dirichlet(np.ones(5))
    assert check_gradients(lambda: kl_divergence(q, z), {"z": z}).ok(1e-7)


# -- engine behaviour ----------------------------------------------------------------


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError):
        ops.mul(x, 2.0).backward()


def test_leaf_gradients_accumulate_until_cleared():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        ops.tsum(ops.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_builds_no_tape():
    x = leaf([1.0])
    with no_grad():
        y = ops.mul(x, 3.0)
    assert not y.requires_grad and y._prev == ()


def test_nan_rejected():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([np.nan]), requires_grad=True)
    with check_finite(), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            ops.log(Tensor(np.array([-1.0])))


def test_relative_error_floor():
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [1.0 + 1e-9]) < 1e-9


# -- optimiser ------------------------------------------------------------------------


def test_adamw_first_step_by_hand():
    store = ParamStore()
    w = store.add("w", [1.0, -2.0])
    w.grad = np.array([0.5, -0.1])
    AdamW(lr=0.1, weight_decay=0.01).step(store)
    # after one step the bias-corrected update is sign(g) (up to eps) plus decay
    m_hat = np.array([0.5, -0.1])
    v_hat = m_hat**2
    expected = np.array([1.0, -2.0]) - 0.1 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(w.data, expected, rtol=0, atol=1e-15)
    assert store.step == 1


def test_adamw_second_step_by_hand():
    store = ParamStore()
    w = store.add("w", [0.0])
    b1, b2, lr = 0.9, 0.999, 0.01
    grads = [2.0, -1.0]
    m = v = 0.0
    x = 0.0
    for t, g in enumerate(grads, start=1):
        w.grad = np.array([g])
        optimizer_step(store, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
    assert abs(w.data[0] - x) < 1e-15


def test_adamw_skips_params_without_grad_and_rejects_nan():
    store = ParamStore()
    a = store.add("a", [1.0])
    store.add("b", [1.0])
    a.grad = np.array([1.0])
    AdamW(lr=0.1).step(store)
    assert "b" not in store.moments and store["b"].data[0] == 1.0
    a.grad = np.array([np.inf])
    with pytest.raises(FloatingPointError, match="'a'"):
        AdamW().step(store)


def test_grad_clip_scales_global_norm():
    store = ParamStore()
    a = store.add("a", [0.0, 0.0])
    a.grad = np.array([30.0, 40.0])
    AdamW(lr=1.0, grad_clip=5.0).step(store)
    m, v = store.moments["a"]
    np.testing.assert_allclose(m, 0.1 * np.array([3.0, 4.0]))


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    store = ParamStore()
    store.add("layer.W", rng.standard_normal((3, 2)))
    store.add("layer.b", rng.standard_normal(2))
    store["layer.W"].grad = rng.standard_normal((3, 2))
    AdamW(lr=0.01).step(store)
    path = tmp_path / "ckpt.json"
    store.save(path)
    back = ParamStore.load(path, expected_shapes={"layer.W": (3, 2), "layer.b": (2,)})
    assert back.digest() == store.digest()
    assert back.step == 1
    np.testing.assert_array_equal(back.moments["layer.W"][1], store.moments["layer.W"][1])
    assert json.loads(path.read_text())["format"] == "duet-checkpoint"


def test_checkpoint_shape_mismatch(tmp_path):
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    store.save(tmp_path / "c.json")
    with pytest.raises(ValueError, match="shape mismatch"):
        ParamStore.load(tmp_path / "c.json", expected_shapes={"w": (2, 3)})
    with pytest.raises(ValueError, match="missing"):
        ParamStore.load(tmp_path / "c.json", expected_shapes={"w": (2, 2), "v": (1,)})


def test_store_iteration_sorted_and_duplicates_rejected():
    store = ParamStore()
    for n in ("b", "a.z", "a.b"):
        store.add(n, [0.0])
    assert store.names() == ["a.b", "a.z", "b"]
    assert sorted(store.group("a")) == ["b", "z"]
    with pytest.raises(KeyError):
        store.add("b", [1.0])
