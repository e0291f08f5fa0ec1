import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from blockdiff import tensor as T


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_matmul_matches_loops(n, k, m, data):
    a = data.draw(hnp.arrays(np.float64, (n, k), elements=finite))
    b = data.draw(hnp.arrays(np.float64, (k, m), elements=finite))
    np.testing.assert_allclose(T.matmul(a, b), triple_loop_matmul(a, b), rtol=1e-12, atol=1e-9)


def test_matmul_shape_errors():
    with pytest.raises(T.NumericError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.NumericError):
        T.matmul(np.ones(3), np.ones((3, 1)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=st.floats(-50, 50)))
def test_softmax_against_formula(x):
    y = T.softmax_rows(x)
    ref = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


@given(st.floats(-100, 100), st.integers(1, 6))
def test_softmax_shift_invariant(c, n):
    x = np.linspace(-3, 3, n)
    np.testing.assert_allclose(T.softmax_rows(x + c), T.softmax_rows(x), atol=1e-12)


def test_softmax_large_logits_no_overflow():
    y = T.softmax_rows(np.array([1000.0, 1000.0, -1000.0], dtype=np.float32))
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.5, 0.5, 0.0], atol=1e-7)


def test_softmax_backward_matches_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(6)
    dy = rng.standard_normal(6)
    num = T.finite_diff_grad(lambda z: float(np.sum(T.softmax_rows(z) * dy)), x)
    np.testing.assert_allclose(T.softmax_backward(dy, T.softmax_rows(x)), num, rtol=1e-7, atol=1e-9)


def test_layernorm_moments():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 32)) * 7 + 3
    p = T.LayerNormParams(np.ones(32), np.zeros(32))
    y = T.layernorm(x, p)
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-5)


def test_layernorm_gain_shift_and_errors():
    x = np.arange(8.0).reshape(2, 4)
    g, b = np.full(4, 2.0), np.full(4, 0.5)
    xhat = T.layernorm(x, T.LayerNormParams(np.ones(4), np.zeros(4)))
    np.testing.assert_allclose(T.layernorm(x, T.LayerNormParams(g, b)), xhat * 2 + 0.5)
    with pytest.raises(T.NumericError):
        T.LayerNormParams(np.ones(4), np.zeros(4), epsilon=0.0)
    with pytest.raises(T.NumericError):
        T.layernorm(x, T.LayerNormParams(np.ones(3), np.zeros(3)))


def test_normalize_backward_finite_difference():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(7)
    w = rng.standard_normal(7)
    xhat, rstd = T.normalize_last(x)
    num = T.finite_diff_grad(lambda z: float(np.sum(T.normalize_last(z)[0] * w)), x)
    np.testing.assert_allclose(T.normalize_last_backward(w, xhat, rstd), num, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("fn,bwd", [(T.gelu, T.gelu_backward), (T.silu, T.silu_backward)])
def test_activation_backward(fn, bwd):
    x = np.linspace(-4, 4, 17)
    num = np.array([(fn(v + 1e-6) - fn(v - 1e-6)) / 2e-6 for v in x])
    np.testing.assert_allclose(bwd(np.ones_like(x), x), num, rtol=1e-6, atol=1e-8)


def test_gelu_tanh_form_reference_points():
    # tanh approximation evaluated by hand with math.tanh
    for v in (-2.0, -0.5, 0.0, 1.0, 3.0):
        ref = 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))
        assert T.gelu(np.array(v)) == pytest.approx(ref, abs=1e-14)


def test_linear_and_backward():
    rng = np.random.default_rng(3)
    p = T.LinearParams(rng.standard_normal((4, 3)), rng.standard_normal(3))
    x = rng.standard_normal((2, 5, 4))
    y = T.linear(x, p)
    np.testing.assert_allclose(y, np.einsum("bti,io->bto", x, p.weight) + p.bias)
    dy = rng.standard_normal(y.shape)
    dx, dw, db = T.linear_backward(dy, x, p.weight)
    np.testing.assert_allclose(dw, np.einsum("bti,bto->io", x, dy))
    np.testing.assert_allclose(db, dy.sum((0, 1)))
    np.testing.assert_allclose(dx, dy @ p.weight.T)
    with pytest.raises(T.NumericError):
        T.LinearParams(np.ones((4, 3)), np.ones(4))
    with pytest.raises(T.NumericError):
        T.linear(np.ones((2, 5)), p)


def test_precision_switch():
    assert T.get_dtype() == np.float32
    with T.precision(64) as dt:
        assert dt == np.float64
        assert T.asarray([1, 2]).dtype == np.float64
        assert T.seeded_init((3, 2), 0).dtype == np.float64
    assert T.asarray([1]).dtype == np.float32
    with pytest.raises(T.NumericError):
        with T.precision(16):
            pass


def test_seeded_init_deterministic():
    a = T.seeded_init((64, 8), 5)
    np.testing.assert_array_equal(a, T.seeded_init((64, 8), 5))
    assert not np.array_equal(a, T.seeded_init((64, 8), 6))
    assert abs(float(a.std()) - 1 / 8) < 0.02
    assert np.all(T.seeded_init((2,), 0, "zeros") == 0)
    with pytest.raises(T.NumericError):
        T.seeded_init((2,), 0, "xavier")


def test_finite_diff_rejects_nonfinite():
    with np.errstate(invalid="ignore"), pytest.raises(T.NumericError):
        T.finite_diff_grad(lambda z: float(np.log(z[0])), np.array([0.0]))
    with pytest.raises(T.NumericError):
        T.check_finite(np.array([1.0, np.nan]))
