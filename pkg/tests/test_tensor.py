import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtv import tensor as tn
from mtv.errors import DimensionError, NonFiniteError
from mtv.gradcheck import _op_cases, gradcheck
from mtv.tensor import Tensor


def loop_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def mp_softmax(row):
    mpmath.mp.dps = 40
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    z = mpmath.fsum(e)
    return np.array([float(v / z) for v in e])


def mp_gelu(x):
    mpmath.mp.dps = 40
    x = mpmath.mpf(float(x))
    return float(x * (1 + mpmath.erf(x / mpmath.sqrt(2))) / 2)


class TestForwardOracles:
    def test_matmul_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), rtol=1e-12, atol=1e-12)

    def test_batched_matmul_matches_loop_per_batch(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))
        out = tn.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], loop_matmul(a[i], b[i]), rtol=1e-12, atol=1e-12)

    def test_linear_is_matmul_plus_bias(self, rng):
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        np.testing.assert_allclose(tn.linear(Tensor(x), Tensor(w), Tensor(b)).data, loop_matmul(x, w) + b, rtol=1e-12)

    def test_softmax_matches_mpmath(self, rng):
        x = rng.standard_normal((3, 6)) * 10
        out = tn.softmax(Tensor(x), axis=-1).data
        for i in range(3):
            np.testing.assert_allclose(out[i], mp_softmax(x[i]), rtol=1e-13, atol=1e-300)

    def test_softmax_extreme_logits_stay_finite(self):
        out = tn.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]])), axis=-1).data
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-300)

    def test_log_softmax_matches_mpmath(self, rng):
        x = rng.standard_normal(5) * 5
        np.testing.assert_allclose(tn.log_softmax(Tensor(x)).data, np.log(mp_softmax(x)), rtol=1e-12)

    @pytest.mark.parametrize("x", [-6.0, -1.3, -1e-3, 0.0, 0.7, 2.5, 8.0])
    def test_gelu_is_exact_erf_form(self, x):
        np.testing.assert_allclose(tn.gelu(Tensor(np.array([x]))).data[0], mp_gelu(x), rtol=1e-14, atol=1e-300)

    def test_layer_norm_matches_formula(self, rng):
        x, g, b = rng.standard_normal((3, 7)), rng.standard_normal(7), rng.standard_normal(7)
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        want = (x - mu) / np.sqrt(var + 1e-6) * g + b
        np.testing.assert_allclose(tn.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, want, rtol=1e-12)

    def test_cross_entropy_without_smoothing_is_nll(self, rng):
        z = rng.standard_normal((4, 5))
        y = np.array([0, 4, 2, 2])
        want = -np.mean([math.log(mp_softmax(z[i])[y[i]]) for i in range(4)])
        np.testing.assert_allclose(tn.cross_entropy(Tensor(z), y).data, want, rtol=1e-12)
        assert tn.cross_entropy(Tensor(z), y, 0.0).data == tn.cross_entropy(Tensor(z), y).data

    def test_cross_entropy_smoothing_mixes_uniform_target(self, rng):
        z = rng.standard_normal((2, 4))
        y = np.array([1, 3])
        eps = 0.2
        lsm = np.log(np.stack([mp_softmax(r) for r in z]))
        target = np.full((2, 4), eps / 4)
        target[np.arange(2), y] += 1 - eps
        np.testing.assert_allclose(tn.cross_entropy(Tensor(z), y, eps).data, -(target * lsm).sum(1).mean(), rtol=1e-12)

    def test_cross_entropy_at_uniform_logits_is_log_classes(self):
        z = np.zeros((6, 16))
        np.testing.assert_allclose(tn.cross_entropy(Tensor(z), np.arange(6)).data, math.log(16), rtol=1e-15)


class TestGradients:
    @pytest.mark.parametrize("name", [c[0] for c in _op_cases(np.random.default_rng(0))])
    def test_op_gradient(self, name):
        cases = {n: (f, x) for n, f, x in _op_cases(np.random.default_rng(7))}
        f, inputs = cases[name]
        assert gradcheck(f, inputs).max_rel_error < 1e-4

    def test_broadcast_gradient_is_summed(self):
        b = Tensor(np.zeros(3), requires_grad=True)
        tn.backward(tn.sum_(tn.add(Tensor(np.ones((4, 3))), b)))
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        tn.backward(tn.sum_(x * x + x))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_take_with_repeated_index_accumulates(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        tn.backward(tn.sum_(tn.take(x, ([0, 0, 2],))))
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with tn.no_grad():
            y = x * 2.0
        assert y.is_leaf and not y.requires_grad


class TestContracts:
    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with pytest.raises(DimensionError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_default_dtype_is_float64_and_switchable(self):
        assert Tensor([1, 2]).dtype == np.float64
        with tn.default_dtype(np.float32):
            assert Tensor([1.0]).dtype == np.float32
        assert tn.get_default_dtype() == np.float64

    def test_mac_counter_counts_matmul_and_linear(self, rng):
        with tn.count_macs() as c:
            tn.matmul(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 5))))
            tn.linear(Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((4, 6))))
        assert c[0] == 3 * 5 * 4 + 2 * 6 * 4

    def test_non_finite_loss_detection(self):
        tn.set_finite_check(True)
        try:
            with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
                tn.log(Tensor(np.array([-1.0])))
        finally:
            tn.set_finite_check(False)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, x):
        out = tn.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
        assert np.all(out >= 0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 6), elements=st.floats(-20, 20)), st.floats(-5, 5))
    def test_softmax_shift_invariance(self, x, c):
        np.testing.assert_allclose(tn.softmax(Tensor(x)).data, tn.softmax(Tensor(x + c)).data, rtol=1e-9, atol=1e-15)
