"""Integer kernels checked against big-integer brute force (Python ints
never overflow, so they are an exact oracle for int32 accumulation)."""

import math

import numpy as np
import pytest

from intmt.errors import ConfigurationError, ShapeMismatchError
from intmt.int_infer import (
    INT32_MAX,
    IntAttentionSite,
    IntDenseLayer,
    attention_forward_int,
    check_accumulator,
    dense_forward_int,
    int_matmul,
)
from intmt.quant import (
    IntTensor,
    QuantConfig,
    fake_quant,
    fake_quant_range_preserving,
    quantize_signed,
    range_scalar_signed,
    ThresholdScalar,
)
from intmt import tensor as T
from intmt.tensor import softmax_values

CFG8 = QuantConfig(bits=8)


def big_int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact reference product in unbounded Python integers."""
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=object)
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(int(a[i, t]) * int(b[t, j]) for t in range(k))
    return out


class TestIntMatmul:
    def test_pinned_extreme_product(self):
        a = IntTensor(np.array([[127]]), 1.0, 8, True)
        b = IntTensor(np.array([[127]]), 1.0, 8, True)
        out = int_matmul(a, b)
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, [[16129]])

    def test_matches_big_integer_brute_force(self):
        rng = np.random.default_rng(53)
        a = rng.integers(-127, 128, size=(5, 9)).astype(np.int32)
        b = rng.integers(-127, 128, size=(9, 6)).astype(np.int32)
        got = int_matmul(IntTensor(a, 1.0, 8, True), IntTensor(b, 1.0, 8, True))
        expected = big_int_matmul(a, b)
        assert got.dtype == np.int32
        np.testing.assert_array_equal(got.astype(object), expected)

    def test_worst_case_at_max_inner_dim_stays_exact(self):
        k = 2 ** 15
        a = IntTensor(np.full((1, k), 127, dtype=np.int32), 1.0, 8, True)
        b = IntTensor(np.full((k, 1), 127, dtype=np.int32), 1.0, 8, True)
        out = int_matmul(a, b)
        assert int(out[0, 0]) == 127 * 127 * k
        assert 127 * 127 * k <= INT32_MAX

    def test_overflowable_inner_dim_rejected(self):
        largest_safe = INT32_MAX // (127 * 127)
        check_accumulator(largest_safe, 127, 127)
        with pytest.raises(ConfigurationError):
            check_accumulator(largest_safe + 1, 127, 127)

    def test_wide_operands_rejected(self):
        a = IntTensor(np.array([[1000]]), 1.0, 16, True)
        with pytest.raises(ConfigurationError):
            int_matmul(a, a)

    def test_shape_mismatch(self):
        a = IntTensor(np.zeros((2, 3), dtype=np.int32), 1.0, 8, True)
        b = IntTensor(np.zeros((4, 2), dtype=np.int32), 1.0, 8, True)
        with pytest.raises(ShapeMismatchError):
            int_matmul(a, b)

    def test_batched_heads_multiply_independently(self):
        rng = np.random.default_rng(59)
        a = rng.integers(-31, 32, size=(2, 3, 4, 5)).astype(np.int32)
        b = rng.integers(-31, 32, size=(2, 3, 5, 4)).astype(np.int32)
        got = int_matmul(IntTensor(a, 1.0, 6, True), IntTensor(b, 1.0, 6, True))
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(
                    got[i, j].astype(object), big_int_matmul(a[i, j], b[i, j]))


class TestIntDenseLayer:
    def test_combined_scale_folds_both_scalars(self):
        w = np.array([[1.27, -0.5], [0.3, 0.9]], dtype=np.float32)
        layer = IntDenseLayer.from_weights(w, None, input_scale=0.02, cfg=CFG8)
        s_w = range_scalar_signed(w, CFG8)
        assert layer.combined_scale == pytest.approx(0.02 * s_w, rel=1e-12)

    def test_overflow_rejected_at_build_time(self):
        w = np.ones((200_000, 2), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            IntDenseLayer.from_weights(w, None, input_scale=0.1, cfg=CFG8)

    def test_matches_fake_quant_float_path(self):
        # the training-time surrogate and the integer kernel must land
        # on the same grid points, so outputs agree to float rounding
        rng = np.random.default_rng(61)
        w = rng.normal(size=(16, 8)).astype(np.float32)
        bias = rng.normal(size=8).astype(np.float32)
        x = rng.normal(size=(4, 16)).astype(np.float32)
        th = ThresholdScalar(z=-3.0)

        layer = IntDenseLayer.from_weights(w, bias, th.scale, CFG8)
        got = dense_forward_int(x, layer, CFG8)

        xq = fake_quant(T.Tensor(x), th, CFG8)
        wq = fake_quant_range_preserving(T.Tensor(w), CFG8)
        ref = T.add(T.matmul(xq, wq), T.Tensor(bias))
        np.testing.assert_allclose(got, ref.data, rtol=1e-5, atol=1e-6)


class TestIntAttention:
    def test_scalar_validation(self):
        with pytest.raises(ConfigurationError):
            IntAttentionSite(s_q=0.0, s_k=1.0, s_u=1.0, s_v=1.0, d_k=4)
        with pytest.raises(ConfigurationError):
            IntAttentionSite(s_q=1.0, s_k=1.0, s_u=1.0, s_v=1.0, d_k=0)

    def test_matches_dequantized_float_reference(self):
        rng = np.random.default_rng(67)
        B, H, L, dk = 2, 2, 5, 4
        q = rng.normal(size=(B, H, L, dk)).astype(np.float32)
        k = rng.normal(size=(B, H, L, dk)).astype(np.float32)
        v = rng.normal(size=(B, H, L, dk)).astype(np.float32)
        site = IntAttentionSite(s_q=0.02, s_k=0.03, s_u=1 / 255, s_v=0.025, d_k=dk)

        got = attention_forward_int(q, k, v, site, CFG8)

        # float reference over the dequantized grids
        qd = quantize_signed(q, site.s_q, CFG8).dequantize()
        kd = quantize_signed(k, site.s_k, CFG8).dequantize()
        scores = (qd.astype(np.float64) @ np.swapaxes(kd, -1, -2).astype(np.float64)
                  / math.sqrt(dk)).astype(np.float32)
        u = softmax_values(scores, axis=-1)
        from intmt.quant import quantize_unsigned
        ud = quantize_unsigned(u, site.s_u, CFG8.as_unsigned()).dequantize()
        vd = quantize_signed(v, site.s_v, CFG8).dequantize()
        ref = (ud.astype(np.float64) @ vd.astype(np.float64)).astype(np.float32)
        np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-5)

    def test_mask_suppresses_positions(self):
        rng = np.random.default_rng(71)
        q = rng.normal(size=(1, 1, 3, 4)).astype(np.float32)
        k = rng.normal(size=(1, 1, 3, 4)).astype(np.float32)
        v = np.zeros((1, 1, 3, 4), dtype=np.float32)
        v[0, 0, 2] = 100.0  # only the masked position carries signal
        site = IntAttentionSite(s_q=0.02, s_k=0.02, s_u=1 / 255, s_v=1.0, d_k=4)
        mask = np.zeros((1, 1, 3, 3), dtype=np.float32)
        mask[..., 2] = -1e9
        out = attention_forward_int(q, k, v, site, CFG8, mask=mask)
        np.testing.assert_allclose(out, 0.0, atol=1e-6)
