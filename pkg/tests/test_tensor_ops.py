"""Forward/backward kernel contracts, with finite differences as the oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnoscore import tensor_ops as T


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestConv1d:
    def test_hand_computed(self):
        y = T.conv1d_valid(np.array([1.0, 2, 3, 4]), np.array([[1.0, 0, -1]]), np.zeros(1))
        np.testing.assert_array_equal(y, [[-2.0, -2.0]])

    def test_identity_kernel(self):
        x = rand(50)
        y = T.conv1d_valid(x, np.array([[1.0]]), np.zeros(1))
        np.testing.assert_array_equal(y[0], x)

    def test_full_scale_extents(self):
        y = T.conv1d_valid(rand(15000), rand((20, 200), 1), np.zeros(20))
        assert y.shape == (20, 14801)

    def test_kernel_longer_than_signal(self):
        with pytest.raises(ValueError):
            T.conv1d_valid(rand(3), rand((1, 5)), np.zeros(1))

    def test_bias_gradient_is_row_sum(self):
        x, k = rand(12), rand((1, 3), 1)
        g = rand((1, 10), 2)
        _, _, gb = T.conv1d_backward(x, k, g)
        np.testing.assert_allclose(gb, g.sum(axis=1))

    def test_zero_upstream_gradient(self):
        x, k = rand(12), rand((2, 3), 1)
        gx, gk, gb = T.conv1d_backward(x, k, np.zeros((2, 10)))
        assert not gx.any() and not gk.any() and not gb.any()

    def test_backward_vs_finite_difference(self):
        x, k, b = rand(12), rand((2, 3), 1), rand(2, 2)
        g = rand((2, 10), 3)
        gx, gk, gb = T.conv1d_backward(x, k, g)
        err_x = T.finite_diff_check(
            lambda v: float((g * T.conv1d_valid(v, k, b)).sum()), x, gx)
        err_k = T.finite_diff_check(
            lambda v: float((g * T.conv1d_valid(x, v, b)).sum()), k, gk)
        err_b = T.finite_diff_check(
            lambda v: float((g * T.conv1d_valid(x, k, v)).sum()), b, gb)
        assert max(err_x, err_k, err_b) < 1e-6

    def test_backward_at_32bit_meets_relaxed_tolerance(self):
        x = rand(12).astype(np.float32)
        k = rand((2, 3), 1).astype(np.float32)
        g = rand((2, 10), 3).astype(np.float32)
        _, gk, _ = T.conv1d_backward(x, k, g)
        # 64-bit differences of the same 32-bit-parameterized objective
        err = T.finite_diff_check(
            lambda v: float((g.astype(np.float64)
                             * T.conv1d_valid(x.astype(np.float64), v, np.zeros(2))).sum()),
            k.astype(np.float64), gk.astype(np.float64))
        assert err < 1e-4

    @given(l=st.integers(1, 40), k=st.integers(1, 40), f=st.integers(1, 4),
           seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_output_extent_closed_form(self, l, k, f, seed):
        if k > l:
            return
        y = T.conv1d_valid(rand(l, seed), rand((f, k), seed + 1), np.zeros(f))
        assert y.shape == (f, l - k + 1)


class TestMaxPool:
    def test_hand_computed(self):
        y, idx = T.maxpool1d(np.array([[1.0, 3, 2, 5]]), 2, 2)
        np.testing.assert_array_equal(y, [[3.0, 5.0]])
        np.testing.assert_array_equal(idx, [[1, 3]])

    def test_full_scale_extents(self):
        y, _ = T.maxpool1d(rand((20, 14801)), 20, 10)
        assert y.shape == (20, 1479)
        y, _ = T.maxpool1d(rand((400, 1450)), 10, 2)
        assert y.shape == (400, 721)

    def test_tie_breaks_to_first_index(self):
        y, idx = T.maxpool1d(np.array([[7.0, 7.0, 7.0]]), 3, 1)
        assert idx[0, 0] == 0

    def test_identity_pool(self):
        x = rand((3, 9))
        y, _ = T.maxpool1d(x, 1, 1)
        np.testing.assert_array_equal(y, x)

    def test_pool_larger_than_input(self):
        with pytest.raises(ValueError):
            T.maxpool1d(rand((1, 4)), 5, 1)

    def test_backward_scatter_non_overlapping(self):
        x = np.array([[1.0, 3, 2, 5]])
        _, idx = T.maxpool1d(x, 2, 2)
        gx = T.maxpool1d_backward(idx, np.array([[10.0, 20.0]]), 4)
        np.testing.assert_array_equal(gx, [[0, 10, 0, 20]])

    def test_backward_accumulates_shared_argmax(self):
        x = np.array([[0.0, 9, 0]])  # windows [0,9] and [9,0] share index 1
        _, idx = T.maxpool1d(x, 2, 1)
        gx = T.maxpool1d_backward(idx, np.array([[2.0, 5.0]]), 3)
        np.testing.assert_array_equal(gx, [[0, 7, 0]])

    def test_backward_vs_finite_difference(self):
        x = rand((3, 17), 5)  # continuous values: ties have measure zero
        g = rand((3, 7), 6)
        _, idx = T.maxpool1d(x, 5, 2)
        gx = T.maxpool1d_backward(idx, g, 17)
        err = T.finite_diff_check(
            lambda v: float((g * T.maxpool1d(v, 5, 2)[0]).sum()), x, gx)
        assert err < 1e-6

    def test_index_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            T.maxpool1d_backward(np.array([[99]]), np.ones((1, 1)), 4)

    @given(l=st.integers(1, 60), p=st.integers(1, 60), s=st.integers(1, 10),
           seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_extent_and_membership(self, l, p, s, seed):
        if p > l:
            return
        x = rand((2, l), seed)
        y, idx = T.maxpool1d(x, p, s)
        assert y.shape == (2, 1 + (l - p) // s)
        # every recorded index lies inside its window
        starts = np.arange(y.shape[1]) * s
        assert np.all(idx >= starts) and np.all(idx < starts + p)
        np.testing.assert_array_equal(np.take_along_axis(x, idx, axis=1), y)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0, 2])), [0, 0, 2])

    def test_gradient_gate(self):
        g = np.array([5.0, 5, 5])
        np.testing.assert_array_equal(
            T.relu_backward(np.array([-1.0, 0, 2]), g), [0, 0, 5])

    def test_vs_finite_difference_away_from_zero(self):
        x = rand(40, 9)
        x = x[np.abs(x) > 1e-3]
        g = rand(x.shape, 10)
        gx = T.relu_backward(x, g)
        err = T.finite_diff_check(lambda v: float((g * T.relu(v)).sum()), x, gx)
        assert err < 1e-6


class TestStack:
    def test_shape(self):
        assert T.stack(rand((20, 1479))).shape == (1, 20, 1479)

    def test_round_trip_identity(self):
        x = rand((4, 7))
        np.testing.assert_array_equal(T.unstack(T.stack(x)), x)

    def test_values_bit_identical(self):
        x = rand((4, 7))
        assert T.stack(x).reshape(4, 7).tobytes() == x.tobytes()


class TestConv2dFullHeight:
    def test_full_scale_extents(self):
        y = T.conv2d_fullheight(rand((1, 20, 1479)), rand((400, 20, 30), 1), np.zeros(400))
        assert y.shape == (400, 1, 1450)

    def test_height_one_reduces_to_conv1d(self):
        x, k, b = rand(30), rand((3, 5), 1), rand(3, 2)
        y2 = T.conv2d_fullheight(x.reshape(1, 1, 30), k.reshape(3, 1, 5), b)
        y1 = T.conv1d_valid(x, k, b)
        np.testing.assert_allclose(y2.reshape(3, -1), y1)

    def test_wrong_height_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d_fullheight(rand((1, 4, 9)), rand((2, 3, 3)), np.zeros(2))

    def test_backward_vs_finite_difference(self):
        x, k, b = rand((1, 3, 11)), rand((2, 3, 4), 1), rand(2, 2)
        g = rand((2, 1, 8), 3)
        gx, gk, gb = T.conv2d_fullheight_backward(x, k, g)
        err_x = T.finite_diff_check(
            lambda v: float((g * T.conv2d_fullheight(v, k, b)).sum()), x, gx)
        err_k = T.finite_diff_check(
            lambda v: float((g * T.conv2d_fullheight(x, v, b)).sum()), k, gk)
        err_b = T.finite_diff_check(
            lambda v: float((g * T.conv2d_fullheight(x, k, v)).sum()), b, gb)
        assert max(err_x, err_k, err_b) < 1e-6

    @given(h=st.integers(1, 6), l=st.integers(1, 30), k=st.integers(1, 30),
           f=st.integers(1, 4), seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_output_extent_closed_form(self, h, l, k, f, seed):
        if k > l:
            return
        y = T.conv2d_fullheight(rand((1, h, l), seed), rand((f, h, k), seed + 1),
                                np.zeros(f))
        assert y.shape == (f, 1, l - k + 1)


class TestDense:
    def test_identity(self):
        x = rand(6)
        np.testing.assert_array_equal(T.dense(x, np.eye(6), np.zeros(6)), x)

    def test_full_scale_extent(self):
        y = T.dense(rand(288400), np.zeros((500, 288400)), np.zeros(500))
        assert y.shape == (500,)

    def test_backward_vs_finite_difference(self):
        x, w, b = rand(7), rand((4, 7), 1), rand(4, 2)
        g = rand(4, 3)
        gx, gw, gb = T.dense_backward(x, w, g)
        err_x = T.finite_diff_check(lambda v: float((g * T.dense(v, w, b)).sum()), x, gx)
        err_w = T.finite_diff_check(lambda v: float((g * T.dense(x, v, b)).sum()), w, gw)
        err_b = T.finite_diff_check(lambda v: float((g * T.dense(x, w, v)).sum()), b, gb)
        assert max(err_x, err_w, err_b) < 1e-6


class TestSoftmaxXent:
    def test_uniform_logits(self):
        probs, loss, _ = T.softmax_xent(np.zeros(5), 3)
        np.testing.assert_allclose(probs, 0.2)
        assert abs(loss - np.log(5)) < 1e-12

    def test_large_logit_stability(self):
        probs, loss, _ = T.softmax_xent(np.array([1000.0, 0, 0, 0, 0]), 0)
        assert np.isfinite(probs).all() and loss < 1e-9

    def test_probabilities_sum_to_one(self):
        probs, _, _ = T.softmax_xent(rand(5, 4) * 30, 1)
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_gradient_vs_finite_difference(self):
        z = rand(5, 8)
        _, _, g = T.softmax_xent(z, 2)
        err = T.finite_diff_check(lambda v: T.softmax_xent(v, 2)[1], z, g)
        assert err < 1e-6


class TestL2Penalty:
    def test_zero_lambda(self):
        penalty, grads = T.l2_penalty([rand(4)], 0.0)
        assert penalty == 0.0 and not grads[0].any()

    def test_single_weight(self):
        penalty, grads = T.l2_penalty([np.array([2.0])], 0.5)
        assert penalty == 1.0
        np.testing.assert_array_equal(grads[0], [1.0])

    def test_gradient_vs_finite_difference(self):
        w = rand(9, 5)
        _, grads = T.l2_penalty([w], 0.3)
        err = T.finite_diff_check(lambda v: T.l2_penalty([v], 0.3)[0], w, grads[0])
        assert err < 1e-6


class TestFiniteDiffCheck:
    def test_identity_function_exact(self):
        x = rand(5)
        err = T.finite_diff_check(lambda v: float(v.sum()), x, np.ones(5))
        assert err < 1e-10

    def test_deterministic(self):
        x = rand(6, 7)
        f = lambda v: float((v ** 2).sum())
        assert T.finite_diff_check(f, x, 2 * x) == T.finite_diff_check(f, x, 2 * x)

    def test_mask_skips_coordinates(self):
        x = np.array([1.0, 2.0])
        bad = np.array([0.0, 4.0])  # wrong on coordinate 0
        mask = np.array([False, True])
        err = T.finite_diff_check(lambda v: float((v ** 2).sum()), x, bad, mask=mask)
        assert err < 1e-6


class TestFiniteGuard:
    def test_accepts_finite(self):
        T.assert_finite("ok", rand(3))

    def test_rejects_nan(self):
        with pytest.raises(FloatingPointError):
            T.assert_finite("bad", np.array([1.0, np.nan]))
