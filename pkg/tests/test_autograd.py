"""Autograd engine: kernel gradients, optimizer, RNG, parameter store."""

import math

import numpy as np
import pytest

from p2f import autograd as ag
from p2f.autograd import ParameterStore, RngState, Tensor
from p2f.gradcheck import mlp_check, run_suite


def test_gradcheck_suite_all_kernels():
    results = run_suite(seed=0, n_instances=3)
    bad = [(r.kernel, r.instance, r.rel_error) for r in results if not r.ok]
    assert not bad, f"finite-difference failures: {bad}"


def test_gradcheck_mlp_end_to_end():
    res = mlp_check()
    assert res.ok, f"mlp rel error {res.rel_error}"


def test_add_broadcast_gradient_shapes():
    a = Tensor(np.ones((3, 4), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((4,), dtype=np.float32), requires_grad=True)
    ag.sum_all(ag.add(a, b)).backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_matmul_gradient_hand_value():
    a = Tensor(np.array([[1.0, 2.0]], dtype=np.float32), requires_grad=True)
    b = Tensor(np.array([[3.0], [4.0]], dtype=np.float32), requires_grad=True)
    ag.sum_all(ag.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
    np.testing.assert_allclose(b.grad, [[1.0], [2.0]])


def test_cross_entropy_uniform_logits():
    # Uniform logits over V classes -> loss = ln V regardless of target.
    V = 8
    logits = Tensor(np.zeros((2, V), dtype=np.float32), requires_grad=True)
    loss = ag.cross_entropy(logits, np.array([3, 5]), np.array([True, True]))
    assert loss.item() == pytest.approx(math.log(V), abs=1e-6)


def test_cross_entropy_mask_excludes_rows():
    logits = np.zeros((2, 4), dtype=np.float32)
    logits[1, 0] = 50.0  # would dominate if the masked row were counted
    loss = ag.cross_entropy(Tensor(logits), np.array([0, 1]),
                            np.array([True, False]))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32))
    out = ag.softmax(x).numpy()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_shift_invariance():
    x = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    a = ag.softmax(Tensor(x)).numpy()
    b = ag.softmax(Tensor(x + 10.0)).numpy()
    # float32 input rounding bounds the agreement, not the softmax itself
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, size=(4, 16)).astype(np.float32))
    g = Tensor(np.ones(16, dtype=np.float32))
    b = Tensor(np.zeros(16, dtype=np.float32))
    out = ag.layer_norm(x, g, b).numpy()
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-2)


def test_dropout_train_vs_eval():
    x = Tensor(np.ones((64, 64), dtype=np.float32))
    rng = RngState(3).generator()
    out = ag.dropout(x, 0.5, rng, train=True).numpy()
    kept = out != 0.0
    # inverted dropout: survivors scaled by 1/(1-p)
    np.testing.assert_allclose(out[kept], 2.0, atol=1e-6)
    assert 0.4 < kept.mean() < 0.6
    ev = ag.dropout(x, 0.5, rng, train=False).numpy()
    np.testing.assert_allclose(ev, 1.0)


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with ag.no_grad():
        y = ag.scale(x, 2.0)
    assert not y.requires_grad


def test_non_finite_forward_raises():
    x = Tensor(np.array([np.inf], dtype=np.float32))
    with pytest.raises(ag.NonFiniteError):
        ag.scale(x, 1.0)


def test_backward_accumulates_over_reuse():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    y = ag.add(ag.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
    ag.sum_all(y).backward()
    np.testing.assert_allclose(x.grad, [5.0])


# --- optimizer -------------------------------------------------------------


def _reference_adamw(w, g, lr, wd, steps):
    w = w.astype(np.float64).copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        w = w - lr * wd * w
        w = w - lr * mhat / (np.sqrt(vhat) + 1e-8)
    return w


def test_adamw_matches_reference_updates():
    rng = np.random.default_rng(9)
    w0 = rng.normal(size=(4, 3)).astype(np.float32)
    g = rng.normal(size=(4, 3)).astype(np.float32)
    store = ParameterStore()
    p = store.add("w", w0.copy())
    for _ in range(5):
        p.grad = g.copy()
        store.adamw_step(lr=1e-2, weight_decay=0.01)
    expected = _reference_adamw(w0, g.astype(np.float64), 1e-2, 0.01, 5)
    np.testing.assert_allclose(p.data, expected, atol=2e-6)


def test_adamw_skips_frozen_and_gradless():
    store = ParameterStore()
    frozen = store.add("f", np.ones(2, dtype=np.float32), frozen=True)
    nograd = store.add("n", np.ones(2, dtype=np.float32))
    frozen.grad = np.ones(2, dtype=np.float32)
    store.adamw_step(lr=1.0)
    np.testing.assert_allclose(frozen.data, 1.0)
    np.testing.assert_allclose(nograd.data, 1.0)


def test_adamw_rejects_nan_gradient():
    store = ParameterStore()
    p = store.add("w", np.ones(2, dtype=np.float32))
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(ag.NonFiniteError):
        store.adamw_step(lr=1e-3)


def test_cosine_schedule_shape():
    total, warm = 100, 0.1
    assert ag.cosine_schedule(0, total, warm, 1.0) == pytest.approx(0.0)
    assert ag.cosine_schedule(10, total, warm, 1.0) == pytest.approx(1.0)
    assert ag.cosine_schedule(55, total, warm, 1.0) == pytest.approx(
        0.5 * (1 + math.cos(math.pi * 0.5)), abs=1e-9)
    assert ag.cosine_schedule(100, total, warm, 1.0) == pytest.approx(0.0, abs=1e-12)


# --- RNG -------------------------------------------------------------------


def test_rng_deterministic_and_stream_separated():
    a = RngState(7).child(1).generator().normal(size=8)
    b = RngState(7).child(1).generator().normal(size=8)
    c = RngState(7).child(2).generator().normal(size=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_string_keys():
    a = RngState(7).child("order", 3)
    b = RngState(7).child("order", 3)
    c = RngState(7).child("drop", 3)
    assert a.stream == b.stream
    assert a.stream != c.stream


def test_rng_child_key_order_matters():
    assert RngState(7).child(1, 2).stream != RngState(7).child(2, 1).stream


# --- parameter store -------------------------------------------------------


def test_store_rejects_duplicate_names():
    store = ParameterStore()
    store.add("b", np.zeros(1, dtype=np.float32))
    store.add("a", np.zeros(1, dtype=np.float32))
    assert set(store.names()) == {"a", "b"}
    with pytest.raises(ValueError):
        store.add("a", np.zeros(1, dtype=np.float32))


def test_store_freeze_toggle():
    store = ParameterStore()
    store.add("w", np.zeros(1, dtype=np.float32), frozen=True)
    assert store.is_frozen("w")
    assert [n for n, _ in store.trainable()] == []
    store.set_frozen("w", False)
    assert [n for n, _ in store.trainable()] == ["w"]
