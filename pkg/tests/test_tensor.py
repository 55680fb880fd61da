import math

import numpy as np
import pytest

from sxda import tensor as T
from sxda.errors import ContractError, DimensionError, NumericError


def t64(arr, requires_grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestConstruction:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            T.Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            T.Tensor([np.inf])

    def test_rejects_zero_extent(self):
        with pytest.raises(DimensionError):
            T.Tensor(np.zeros((2, 0)))

    def test_default_dtype_is_float32(self):
        assert T.Tensor([1, 2, 3]).dtype == np.float32


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(2, 2))
        out = T.matmul(t64(np.eye(2)), t64(a))
        np.testing.assert_allclose(out.data, a)

    def test_hand_case(self):
        out = T.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"3.*4.*3.*2|\(3, 4\)"):
            T.matmul(t64(np.zeros((3, 4))), t64(np.zeros((3, 2))))

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))

        err_a = T.gradcheck(lambda x: T.reduce_sum(T.mul(T.matmul(x, t64(b)), t64(w))), t64(a))
        err_b = T.gradcheck(lambda x: T.reduce_sum(T.mul(T.matmul(t64(a), x), t64(w))), t64(b))
        assert err_a < 1e-6
        assert err_b < 1e-6

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(4, 2))
        err = T.gradcheck(lambda x: T.reduce_sum(T.matmul(t64(a), x)), t64(b))
        assert err < 1e-6


class TestSoftmax:
    def test_constant_row(self):
        out = T.softmax_rows(t64(np.zeros((2, 5))))
        np.testing.assert_allclose(out.data, np.full((2, 5), 0.2))

    def test_closed_form(self):
        out = T.softmax_rows(t64([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        y0 = T.softmax_rows(t64(x)).data
        y1 = T.softmax_rows(t64(x + 17.3)).data
        np.testing.assert_allclose(y0, y1, atol=1e-6)

    def test_large_magnitude_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.normal(scale=1e4, size=(3, 7)).astype(np.float32)
            y = T.softmax_rows(T.Tensor(x)).data
            assert np.all(y >= 0)
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        err = T.gradcheck(lambda v: T.reduce_sum(T.mul(T.softmax_rows(v), t64(w))), t64(x))
        assert err < 1e-6


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 4, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        out = T.conv2d(t64(x), t64(k), stride=1, padding="reflect")
        np.testing.assert_allclose(out.data, x)

    def test_uniform_kernel_on_constant(self):
        x = np.full((6, 6, 2), 0.37)
        k = np.zeros((3, 3, 2, 2))
        for c in range(2):
            k[:, :, c, c] = 1.0 / 9.0
        out = T.conv2d(t64(x), t64(k), padding="reflect")
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_stride2_extents(self):
        x = t64(np.zeros((8, 8, 2)))
        k = t64(np.zeros((3, 3, 2, 5)))
        assert T.conv2d(x, k, stride=2).shape == (4, 4, 5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(t64(np.zeros((4, 4, 3))), t64(np.zeros((3, 3, 2, 1))))

    @pytest.mark.parametrize("padding,stride", [("reflect", 1), ("zero", 1), ("reflect", 2)])
    def test_gradcheck(self, padding, stride):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        w = rng.normal(size=T.conv2d(t64(x), t64(k), stride, padding).shape)

        def loss_x(v):
            return T.reduce_sum(T.mul(T.conv2d(v, t64(k), stride, padding), t64(w)))

        def loss_k(v):
            return T.reduce_sum(T.mul(T.conv2d(t64(x), v, stride, padding), t64(w)))

        assert T.gradcheck(loss_x, t64(x)) < 1e-6
        assert T.gradcheck(loss_k, t64(k)) < 1e-6


class TestLayerNorm:
    def test_fixed_point(self):
        v = np.array([-1.0, 1.0]) * math.sqrt(1.0)  # zero mean unit variance
        x = np.broadcast_to(v, (3, 3, 2)).copy()
        out = T.layer_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)))
        np.testing.assert_allclose(out.data, x, atol=1e-5)

    def test_constant_vector_collapses(self):
        x = np.full((2, 2, 4), 3.7)
        out = T.layer_norm(t64(x), t64(np.ones(4)), t64(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-2)

    def test_gradcheck_all_inputs(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4, 5))
        gamma = rng.normal(size=5)
        beta = rng.normal(size=5)
        w = rng.normal(size=(3, 4, 5))

        def wrap(fx):
            return T.reduce_sum(T.mul(fx, t64(w)))

        assert (
            T.gradcheck(lambda v: wrap(T.layer_norm(v, t64(gamma), t64(beta))), t64(x)) < 1e-5
        )
        assert (
            T.gradcheck(lambda v: wrap(T.layer_norm(t64(x), v, t64(beta))), t64(gamma)) < 1e-5
        )
        assert (
            T.gradcheck(lambda v: wrap(T.layer_norm(t64(x), t64(gamma), v)), t64(beta)) < 1e-5
        )


class TestActivations:
    def test_fixed_points(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0
        assert T.sigmoid(t64([0.0])).data[0] == 0.5
        assert T.relu(t64([-1.0])).data[0] == 0.0

    def test_gelu_at_one_matches_gaussian_cdf(self):
        # gelu(1) = 1 * Phi(1); Phi(1) = 0.8413447460685429
        assert abs(T.gelu(t64([1.0])).data[0] - 0.8413447460685429) < 1e-4

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=20)
        x = x[np.abs(x) > 1e-3]  # exclude relu kinks
        w = np.random.default_rng(10).normal(size=x.shape)

        for op in (T.relu, T.sigmoid, T.gelu, T.abs_):
            err = T.gradcheck(lambda v, op=op: T.reduce_sum(T.mul(op(v), t64(w))), t64(x))
            assert err < 1e-5, op.__name__


class TestStructural:
    def test_reshape_roundtrip(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 5))
        y = T.reshape(T.reshape(t64(x), (12, 5)), (3, 4, 5))
        np.testing.assert_array_equal(y.data, x)

    def test_upsample_nearest_quadrants(self):
        x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
        y = T.upsample_nearest(x).data[:, :, 0]
        expect = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64
        )
        np.testing.assert_array_equal(y, expect)

    def test_concat_grad_splits_back(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(2, 3, 2))
        b = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(2, 3, 6))

        def loss_a(v):
            return T.reduce_sum(T.mul(T.concat_channels([v, t64(b)]), t64(w)))

        def loss_b(v):
            return T.reduce_sum(T.mul(T.concat_channels([t64(a), v]), t64(w)))

        # linear map: central differences are truncation-free, use a wide step
        assert T.gradcheck(loss_a, t64(a), eps=1e-3) < 1e-9
        assert T.gradcheck(loss_b, t64(b), eps=1e-3) < 1e-9

    def test_pad_reflect_values(self):
        x = np.arange(9, dtype=np.float64).reshape(3, 3, 1)
        y = T.pad_reflect(t64(x), 1).data[:, :, 0]
        # edge-repeating mirror: index -1 maps to 0, index 3 maps to 2
        assert y[0, 0] == x[0, 0, 0]
        assert y[-1, -1] == x[2, 2, 0]
        assert y[0, 1] == x[0, 0, 0]

    def test_pad_and_gather_gradchecks(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 4, 2))
        w1 = rng.normal(size=(6, 6, 2))
        assert (
            T.gradcheck(lambda v: T.reduce_sum(T.mul(T.pad_reflect(v, 1), t64(w1))), t64(x), eps=1e-3)
            < 1e-9
        )
        assert (
            T.gradcheck(lambda v: T.reduce_sum(T.mul(T.pad_zero(v, 1), t64(w1))), t64(x), eps=1e-3)
            < 1e-9
        )

        rows = np.array([[0, 0], [3, 1]])
        cols = np.array([[0, 0], [2, 2]])
        w2 = rng.normal(size=(2, 2, 2))
        assert (
            T.gradcheck(
                lambda v: T.reduce_sum(T.mul(T.gather_hw(v, rows, cols), t64(w2))), t64(x), eps=1e-3
            )
            < 1e-9
        )

    def test_stack_take_roundtrip(self):
        rng = np.random.default_rng(14)
        xs = [rng.normal(size=(2, 2)) for _ in range(3)]
        s = T.stack0([t64(x) for x in xs])
        for i in range(3):
            np.testing.assert_array_equal(T.take0(s, i).data, xs[i])


class TestBackward:
    def test_sum_of_squares(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_disconnected_leaf_has_no_grad(self):
        x = T.Tensor([1.0], requires_grad=True)
        y = T.Tensor([2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
            T.mul(y, y)  # recorded but not on the loss path
        T.backward(tape, loss)
        assert y.grad is None  # treated as zero

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ContractError):
            T.backward(tape, y)

    def test_shared_subexpression_accumulates(self):
        # f(x) = sum(s * s) with s = x + x used twice; compare against gradcheck
        rng = np.random.default_rng(15)
        x = rng.normal(size=(3, 3))

        def f(v):
            s = T.add(v, v)
            return T.reduce_sum(T.mul(s, s))

        assert T.gradcheck(f, t64(x)) < 1e-8

    def test_composite_chain_gradcheck(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 4))
        v = rng.normal(size=(3, 4))

        def f(inp):
            return T.reduce_sum(T.mul(T.softmax_rows(T.matmul(inp, t64(w))), t64(v)))

        assert T.gradcheck(f, t64(x)) < 1e-5


class TestGradcheckItself:
    def test_linear_map_is_nearly_exact(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(4, 4))
        err = T.gradcheck(lambda v: T.reduce_sum(T.mul(v, t64(a))), t64(np.ones((4, 4))), eps=1e-3)
        assert err < 1e-9

    def test_randomized_ops_many_seeds(self):
        # abbreviated version of the 100-seed invariant (full run in selftest)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3))
            w = rng.normal(size=(3, 3))
            v = rng.normal(size=(2, 3))

            def f(inp):
                return T.reduce_sum(T.mul(T.softmax_rows(T.matmul(inp, t64(w))), t64(v)))

            assert T.gradcheck(f, t64(x)) < 1e-6
