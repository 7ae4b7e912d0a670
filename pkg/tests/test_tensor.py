"""Forward-path tests for the tensor op set, against brute-force oracles."""

import numpy as np
import pytest

from samsnet.tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    concat,
    conv2d,
    depthwise_conv2d,
    layer_norm,
    matmul_batched,
    mul,
    narrow,
    relu,
    sigmoid,
    softmax_rows,
    sub,
    transpose_conv2d,
    tsum,
)


from oracles import conv2d_oracle


class TestTensorBasics:
    def test_shape_data_invariant(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert t.shape == (2, 3)
        assert int(np.prod(t.shape)) == t.data.size

    def test_default_dtype_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_preserved(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64

    def test_grad_present_iff_requires_grad(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros(3))
        assert a.grad is not None and a.grad.shape == a.shape
        assert b.grad is None

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))


class TestElementwise:
    def test_add_sub_mul(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert np.allclose(add(Tensor(a), Tensor(b)).data, a + b, atol=1e-6)
        assert np.allclose(sub(Tensor(a), Tensor(b)).data, a - b, atol=1e-6)
        assert np.allclose(mul(Tensor(a), Tensor(b)).data, a * b, atol=1e-6)

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_ops_do_not_mutate_inputs(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        tx, tk, tb = Tensor(x.copy()), Tensor(k.copy()), Tensor(b.copy())
        conv2d(tx, tk, tb)
        relu(tx)
        softmax_rows(tx)
        assert np.array_equal(tx.data, x)
        assert np.array_equal(tk.data, k)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 4, 4)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        y1 = conv2d(x, k, b).data
        y2 = conv2d(x, k, b).data
        assert np.array_equal(y1, y2)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_rows(Tensor([0.0, 0.0])).data
        assert np.allclose(out, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 7))
        a = softmax_rows(Tensor(x, dtype=np.float64)).data
        b = softmax_rows(Tensor(x + 13.7, dtype=np.float64)).data
        assert np.allclose(a, b, atol=1e-6)

    def test_known_values(self):
        # exp([1,2,3]) normalized, evaluated at high precision
        out = softmax_rows(Tensor([1.0, 2.0, 3.0], dtype=np.float64)).data
        assert np.allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        out = softmax_rows(Tensor(rng.normal(size=(5, 6, 9)))).data
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out > 0) and np.all(out < 1)


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        x = Tensor(np.full((3, 5), 2.5))
        g = Tensor(np.ones(5))
        b = Tensor(np.zeros(5))
        out = layer_norm(x, g, b, axes=(1,), eps=1e-5).data
        assert np.allclose(out, 0.0, atol=1e-5)

    def test_two_point_standardization(self):
        x = Tensor(np.array([1.0, 3.0], dtype=np.float64))
        g = Tensor(np.ones(2, dtype=np.float64))
        b = Tensor(np.zeros(2, dtype=np.float64))
        out = layer_norm(x, g, b, axes=(0,), eps=1e-12).data
        assert np.allclose(out, [-1.0, 1.0], atol=1e-5)

    def test_output_moments(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 6)), dtype=np.float64)
        g = Tensor(np.ones(6, dtype=np.float64))
        b = Tensor(np.zeros(6, dtype=np.float64))
        out = layer_norm(x, g, b, axes=(1,), eps=1e-10).data
        assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
        assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-5)

    def test_multi_axis_norm(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 4, 5)), dtype=np.float64)
        g = Tensor(np.ones((3, 5), dtype=np.float64))
        b = Tensor(np.zeros((3, 5), dtype=np.float64))
        out = layer_norm(x, g, b, axes=(0, 2), eps=1e-10).data
        for t in range(4):
            assert abs(out[:, t, :].mean()) < 1e-6
            assert abs(out[:, t, :].var() - 1.0) < 1e-5

    def test_bad_gain_shape(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)), Tensor(np.zeros(2)), axes=(1,))

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), axes=(0,), eps=0.0)


class TestMatmulBatched:
    def test_identity_batch(self):
        rng = np.random.default_rng(7)
        b = rng.normal(size=(3, 4, 5))
        eye = np.broadcast_to(np.eye(4), (3, 4, 4)).copy()
        out = matmul_batched(Tensor(eye, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        assert np.allclose(out, b, atol=1e-12)

    def test_scalar_case(self):
        out = matmul_batched(Tensor([[[2.0]]]), Tensor([[[3.0]]])).data
        assert np.allclose(out, [[[6.0]]])

    def test_loop_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 5))
        out = matmul_batched(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        ref = np.zeros((2, 3, 5))
        for bb in range(2):
            for i in range(3):
                for j in range(5):
                    for k in range(4):
                        ref[bb, i, j] += a[bb, i, k] * b[bb, k, j]
        assert np.allclose(out, ref, rtol=1e-6)

    def test_transpose_b(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 5, 4))
        out = matmul_batched(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), transpose_b=True).data
        assert np.allclose(out, a @ b.transpose(0, 2, 1), rtol=1e-6)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            matmul_batched(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 5, 6))))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 5, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), Tensor(np.zeros(1, dtype=np.float64))).data
        assert np.allclose(out, x, atol=1e-12)

    def test_1x1_channel_mix(self):
        x = np.array([1.0, 2.0]).reshape(2, 1, 1)
        k = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
        out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data
        assert np.allclose(out, [[[1.5]]])

    def test_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        ref = conv2d_oracle(x, k, b)
        assert np.allclose(out, ref, rtol=1e-6, atol=1e-9)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestDepthwiseConv:
    def test_identity(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 4, 4))
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1.0
        out = depthwise_conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data
        assert np.allclose(out, x, atol=1e-12)

    def test_channel_independence(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4, 4))
        k = rng.normal(size=(3, 3, 3))
        k0 = k.copy()
        k0[0] = 0.0
        full = depthwise_conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data
        gated = depthwise_conv2d(Tensor(x, dtype=np.float64), Tensor(k0, dtype=np.float64)).data
        assert np.allclose(gated[0], 0.0)
        assert np.allclose(gated[1:], full[1:])

    def test_matches_per_channel_conv2d(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(3, 4, 4))
        k = rng.normal(size=(3, 3, 3))
        out = depthwise_conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data
        for c in range(3):
            ref = conv2d_oracle(x[c : c + 1], k[c].reshape(1, 1, 3, 3), np.zeros(1))
            assert np.allclose(out[c], ref[0], rtol=1e-6, atol=1e-9)

    def test_channel_count_error(self):
        with pytest.raises(ValueError):
            depthwise_conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 3, 3))))


class TestTransposeConv:
    def test_1x1_equals_conv(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(3, 4, 5))
        w = rng.normal(size=(3, 2, 1, 1))
        out_t = transpose_conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
        out_c = conv2d(Tensor(x, dtype=np.float64), Tensor(w.transpose(1, 0, 2, 3).copy(), dtype=np.float64)).data
        assert np.allclose(out_t, out_c, atol=1e-12)

    def test_adjoint_identity(self):
        # <conv2d(x), y> == <x, transpose_conv2d(y)> with shared kernels, zero bias
        rng = np.random.default_rng(16)
        x = rng.normal(size=(3, 6, 7))
        y = rng.normal(size=(4, 6, 7))
        k = rng.normal(size=(4, 3, 3, 3))
        cx = conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data
        # the same (4, 3, k, k) array serves both ops: conv2d reads it as
        # (C_out, C_in, k, k), transpose_conv2d as (C_in, C_out, k, k)
        ty = transpose_conv2d(Tensor(y, dtype=np.float64), Tensor(k, dtype=np.float64)).data
        lhs = float(np.sum(cx * y))
        rhs = float(np.sum(x * ty))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs))

    def test_zero_input_broadcasts_bias(self):
        x = Tensor(np.zeros((2, 3, 4)))
        w = Tensor(np.zeros((2, 3, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5]))
        out = transpose_conv2d(x, w, b).data
        for c, val in enumerate([1.0, -2.0, 0.5]):
            assert np.allclose(out[c], val)


class TestAdjointness:
    """<L(x), y> == <x, L^T(y)> for every linear op, via autodiff transpose."""

    @pytest.mark.parametrize("case", ["conv", "depthwise", "matmul"])
    def test_linear_op_adjoint(self, case):
        rng = np.random.default_rng(17)
        if case == "conv":
            x = Tensor(rng.normal(size=(2, 5, 6)), dtype=np.float64, requires_grad=True)
            k = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
            y = rng.normal(size=(3, 5, 6))
            with Tape() as tape:
                out = conv2d(x, k)
                loss = tsum(mul(out, Tensor(y, dtype=np.float64)))
            tape.backward(loss)
            lhs = float(np.sum(out.data * y))
            rhs = float(np.sum(x.data * x.grad))
        elif case == "depthwise":
            x = Tensor(rng.normal(size=(3, 4, 4)), dtype=np.float64, requires_grad=True)
            k = Tensor(rng.normal(size=(3, 3, 3)), dtype=np.float64)
            y = rng.normal(size=(3, 4, 4))
            with Tape() as tape:
                out = depthwise_conv2d(x, k)
                loss = tsum(mul(out, Tensor(y, dtype=np.float64)))
            tape.backward(loss)
            lhs = float(np.sum(out.data * y))
            rhs = float(np.sum(x.data * x.grad))
        else:
            x = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64, requires_grad=True)
            b = Tensor(rng.normal(size=(2, 4, 5)), dtype=np.float64)
            y = rng.normal(size=(2, 3, 5))
            with Tape() as tape:
                out = matmul_batched(x, b)
                loss = tsum(mul(out, Tensor(y, dtype=np.float64)))
            tape.backward(loss)
            lhs = float(np.sum(out.data * y))
            rhs = float(np.sum(x.data * x.grad))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


class TestShapeOps:
    def test_concat_narrow_roundtrip(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 7, 3)))
        a = narrow(x, 1, 0, 3)
        b = narrow(x, 1, 3, 4)
        back = concat([a, b], axis=1)
        assert np.array_equal(back.data, x.data)

    def test_narrow_out_of_range(self):
        with pytest.raises(ValueError):
            narrow(Tensor(np.zeros((2, 4))), 1, 3, 2)


class TestNanGuard:
    def test_overflow_aborts_with_op_name(self):
        big = Tensor(np.full((2, 2), 1e30, dtype=np.float32))
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError, match="mul"):
                mul(big, big)
