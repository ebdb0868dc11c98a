import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionseg import core
from regionseg.core import Param, ShapeError, gradcheck

from .oracles import numeric_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestConv2d:
    def test_identity_kernel(self):
        out, _ = core.conv2d_forward(np.array([[[5.0]]]), np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out, [[[5.0]]])

    def test_scalar_kernel_scales(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
        out, _ = core.conv2d_forward(x, np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out[..., 0], [[2, 4], [6, 8]])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 6, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        out, _ = core.conv2d_forward(x, k, b, stride=2, pad=1)
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros((3, 3, 3))
        for i in range(3):
            for j in range(3):
                patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[i, j] = np.einsum("abc,abcd->d", patch, k) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 6, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        g = rng.normal(size=(6, 6, 3))
        out, cache = core.conv2d_forward(x, k, None, 1, 1)
        dx, dk, _ = core.conv2d_backward(g, cache)
        nx = numeric_grad(lambda v: float((g * core.conv2d_forward(v, k, None, 1, 1)[0]).sum()), x)
        nk = numeric_grad(lambda v: float((g * core.conv2d_forward(x, v, None, 1, 1)[0]).sum()), k)
        assert max(core.rel_error(a, n) for a, n in zip(dx.ravel(), nx.ravel())) < 1e-6
        assert max(core.rel_error(a, n) for a, n in zip(dk.ravel(), nk.ravel())) < 1e-6

    def test_depth_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            core.conv2d_forward(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            core.conv2d_forward(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)))

    def test_does_not_mutate_input(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        before = x.copy()
        core.conv2d_forward(x, np.ones((3, 3, 1, 1)), None, 1, 1)
        np.testing.assert_array_equal(x, before)


class TestRelu:
    def test_definition(self):
        out, _ = core.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 2])

    def test_zeros(self):
        out, mask = core.relu_forward(np.zeros(5))
        np.testing.assert_array_equal(out, np.zeros(5))
        np.testing.assert_array_equal(core.relu_backward(np.ones(5), mask), np.zeros(5))

    def test_gradcheck_positive_input(self):
        x = np.random.default_rng(2).uniform(0.5, 2.0, size=(3, 4))

        def f(v):
            out, mask = core.relu_forward(v)
            return float(out.sum()), core.relu_backward(np.ones_like(v), mask)

        assert gradcheck(f, x).max_rel_error < 1e-8

    def test_gradcheck_no_zero_entries(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 5))
        g = rng.normal(size=x.shape)

        def f(v):
            out, mask = core.relu_forward(v)
            return float((g * out).sum()), core.relu_backward(g, mask)

        res = gradcheck(f, x, route=lambda v: v > 0)
        assert res.max_rel_error < 1e-6 and not res.skipped


class TestMaxpool:
    def test_definition(self):
        out, _ = core.maxpool2_forward(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4

    def test_constant_routes_to_first(self):
        out, cache = core.maxpool2_forward(np.full((2, 2, 1), 7.0))
        assert out[0, 0, 0] == 7.0
        d = core.maxpool2_backward(np.ones((1, 1, 1)), cache)
        np.testing.assert_array_equal(d[..., 0], [[1, 0], [0, 0]])

    def test_odd_rejected(self):
        with pytest.raises(ShapeError):
            core.maxpool2_forward(np.zeros((3, 4, 1)))

    def test_gradcheck_tie_free(self):
        rng = np.random.default_rng(4)
        x = rng.permutation(16).reshape(4, 4, 1).astype(float)
        g = rng.normal(size=(2, 2, 1))

        def f(v):
            out, cache = core.maxpool2_forward(v)
            return float((g * out).sum()), core.maxpool2_backward(g, cache)

        assert gradcheck(f, x).max_rel_error < 1e-6


class TestLinear:
    def test_identity(self):
        out, _ = core.linear_forward(np.array([3.0, 7.0]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out, [3, 7])

    def test_bias_only(self):
        out, _ = core.linear_forward(np.array([3.0, 7.0]), np.zeros((2, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out, [1, 2])

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=4), rng.normal(size=(4, 3)), rng.normal(size=3)
        g = rng.normal(size=3)
        _, cache = core.linear_forward(x, w, b)
        dx, dw, db = core.linear_backward(g, cache)
        np.testing.assert_allclose(dx, numeric_grad(lambda v: g @ core.linear_forward(v, w, b)[0], x), rtol=1e-7)
        np.testing.assert_allclose(dw, numeric_grad(lambda v: g @ core.linear_forward(x, v, b)[0], w), rtol=1e-7)
        np.testing.assert_allclose(db, g, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            core.linear_forward(np.zeros(3), np.zeros((4, 2)), np.zeros(2))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(core.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_large_inputs_do_not_overflow(self):
        np.testing.assert_allclose(core.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(core.softmax(np.array([math.log(1), math.log(3)])), [0.25, 0.75], rtol=1e-14)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_sums_to_one(self, s):
        p = core.softmax(s)
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_log_softmax_consistent(self, s):
        np.testing.assert_allclose(np.exp(core.log_softmax(s)), core.softmax(s), rtol=1e-12, atol=1e-300)

    def test_softmax_logloss_gradcheck(self):
        rng = np.random.default_rng(6)
        s = rng.normal(size=5)

        def f(v):
            logp = core.log_softmax(v)
            d = np.zeros(5)
            d[2] = -1.0
            return -float(logp[2]), core.log_softmax_backward(d, logp)

        assert gradcheck(f, s).max_rel_error < 1e-6


class TestGradcheck:
    def test_reports_wrong_gradient(self):
        res = gradcheck(lambda v: (float((v ** 2).sum()), 3 * v), np.array([1.0, 2.0]))
        assert res.max_rel_error > 0.1

    def test_skips_kinks(self):
        # |x| with x at a point where +-eps flips the sign
        x = np.array([1e-7, 2.0])

        def f(v):
            return float(np.abs(v).sum()), np.sign(v)

        res = gradcheck(f, x, route=lambda v: v > 0)
        assert res.skipped == [0]
        assert res.checked == 1 and res.max_rel_error < 1e-8

    def test_relative_error_definition(self):
        assert core.rel_error(1.0, 1.0) == 0.0
        assert core.rel_error(0.0, 1e-12) == pytest.approx(1e-4)
        assert core.rel_error(2.0, 1.0) == pytest.approx(0.5)


class TestParam:
    def test_shapes_and_zero_grad(self):
        p = Param(np.ones((2, 3)))
        assert p.grad.shape == p.momentum_buf.shape == (2, 3)
        p.grad += 5
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, 0)

    def test_glorot_bounds(self):
        w = core.glorot_uniform(np.random.default_rng(0), (50, 40), 50, 40)
        assert np.abs(w).max() <= math.sqrt(6 / 90)

    @settings(max_examples=20)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_forward_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 2))
        a, _ = core.conv2d_forward(x, k, None, 1, 1)
        b, _ = core.conv2d_forward(x.copy(), k.copy(), None, 1, 1)
        assert a.tobytes() == b.tobytes()
