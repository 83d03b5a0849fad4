"""Quantization primitives: pinned hand-computed values, exact gradient
formulas, and property-based round-trip bounds."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from intmt import tensor as T
from intmt.errors import ConfigurationError
from intmt.quant import (
    LN2,
    ZERO_RANGE_FLOOR,
    IntTensor,
    QuantConfig,
    ThresholdScalar,
    bankers_round,
    fake_quant,
    fake_quant_range_preserving,
    quantize_signed,
    quantize_unsigned,
    range_scalar_signed,
    range_scalar_unsigned,
    threshold_gradient,
)

CFG8 = QuantConfig(bits=8)
CFG4 = QuantConfig(bits=4)


class TestBankersRound:
    def test_half_goes_to_even(self):
        assert bankers_round(2.5) == 2
        assert bankers_round(3.5) == 4
        assert bankers_round(0.5) == 0
        assert bankers_round(-0.5) == 0
        assert bankers_round(-1.5) == -2

    def test_array_input(self):
        out = bankers_round(np.array([1.4, 1.6]))
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, [1, 2])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            bankers_round(float("nan"))
        with pytest.raises(ValueError):
            bankers_round(np.array([1.0, np.inf]))


class TestQuantizeSigned:
    def test_pinned_values(self):
        q = quantize_signed(np.array([1.0, -0.5, 3.0]), 0.1, CFG8)
        np.testing.assert_array_equal(q.data, [10, -5, 30])
        assert q.scale == 0.1 and q.bits == 8 and q.signed

    def test_saturation_clips_after_rounding(self):
        q = quantize_signed(np.array([20.0]), 0.1, CFG8)
        np.testing.assert_array_equal(q.data, [127])

    def test_half_step_rounds_to_even(self):
        q = quantize_signed(np.array([0.25]), 0.1, CFG8)
        np.testing.assert_array_equal(q.data, [2])  # 2.5 -> 2, not 3

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            quantize_signed(np.array([1.0]), 0.0, CFG8)

    @given(hnp.arrays(np.float32, st.integers(1, 40),
                      elements=st.floats(-1e4, 1e4, width=32)),
           st.floats(1e-6, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_codes_always_in_range(self, x, s):
        q = quantize_signed(x, s, CFG8)
        assert q.data.min() >= -127 and q.data.max() <= 127


class TestQuantizeUnsigned:
    def test_full_range_used(self):
        q = quantize_unsigned(np.array([0.0, 255.0]), 1.0, CFG8)
        np.testing.assert_array_equal(q.data, [0, 255])
        assert not q.signed

    def test_negative_element_named_in_error(self):
        with pytest.raises(ValueError, match=r"index \(1,\)"):
            quantize_unsigned(np.array([0.5, -0.1]), 1.0, CFG8)


class TestRangeScalars:
    def test_pinned_signed_example(self):
        s = range_scalar_signed(np.array([2.54, -1.0]), CFG8)
        assert s == pytest.approx(0.02, rel=1e-12)

    def test_max_element_maps_to_limit(self):
        x = np.array([2.54, -1.0], dtype=np.float32)
        s = range_scalar_signed(x, CFG8)
        q = quantize_signed(x, s, CFG8)
        assert q.data.max() == 127

    def test_unsigned_uses_full_span(self):
        x = np.array([0.0, 1.0, 5.1])
        s = range_scalar_unsigned(x, CFG8)
        assert s == pytest.approx(5.1 / 255, rel=1e-12)
        assert quantize_unsigned(x, s, CFG8).data.max() == 255

    def test_zero_tensor_gets_floor_scale(self):
        assert range_scalar_signed(np.zeros(4), CFG8) == ZERO_RANGE_FLOOR
        assert range_scalar_unsigned(np.zeros(4), CFG8) == ZERO_RANGE_FLOOR

    def test_empty_tensor_rejected(self):
        with pytest.raises(ValueError):
            range_scalar_signed(np.array([]), CFG8)

    @given(hnp.arrays(np.float32, st.integers(1, 64),
                      elements=st.floats(-1e3, 1e3, width=32)))
    @settings(max_examples=80, deadline=None)
    def test_round_trip_error_within_half_step(self, x):
        s = range_scalar_signed(x, CFG8)
        q = quantize_signed(x, s, CFG8)
        err = np.abs(q.dequantize().astype(np.float64) - x.astype(np.float64))
        assert np.all(err <= s / 2 + 1e-9)


class TestIntTensor:
    def test_out_of_range_codes_rejected(self):
        with pytest.raises(ConfigurationError):
            IntTensor(np.array([128]), 1.0, 8, True)
        with pytest.raises(ConfigurationError):
            IntTensor(np.array([-1]), 1.0, 8, False)

    def test_dequantize_and_transpose(self):
        t = IntTensor(np.array([[1, 2], [3, 4]]), 0.5, 8, True)
        np.testing.assert_allclose(t.dequantize(), [[0.5, 1.0], [1.5, 2.0]])
        np.testing.assert_array_equal(t.transposed().data, [[1, 3], [2, 4]])


class TestQuantConfig:
    def test_limits(self):
        assert CFG8.positive_limit == 127
        assert CFG8.unsigned_limit == 255
        assert QuantConfig(bits=6).positive_limit == 31
        assert QuantConfig(bits=16).positive_limit == 32767

    def test_bits_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            QuantConfig(bits=1)
        with pytest.raises(ConfigurationError):
            QuantConfig(bits=17)


class TestFakeQuantForward:
    def test_small_value_rounds_to_zero(self):
        th = ThresholdScalar(z=0.0)
        y = fake_quant(T.Tensor([0.30]), th, CFG8)
        np.testing.assert_allclose(y.data, [0.0])

    def test_saturated_value_clamps_to_grid_edge(self):
        th = ThresholdScalar(z=0.0)
        y = fake_quant(T.Tensor([10.0]), th, CFG4)
        np.testing.assert_allclose(y.data, [7.0])

    def test_idempotent(self):
        rng = np.random.default_rng(31)
        x = T.Tensor(rng.normal(size=64))
        th = ThresholdScalar(z=-3.0)
        once = fake_quant(x, th, CFG8)
        twice = fake_quant(once, th, CFG8)
        np.testing.assert_array_equal(once.data, twice.data)


class TestFakeQuantGradients:
    def test_straight_through_mask(self):
        # saturation gates dL/dx exactly: |round(x/s)| > p -> 0, else 1
        th = ThresholdScalar(z=0.0)
        x = T.Tensor([0.30, 10.0, -200.0, 126.4])
        loss = T.sum_all(fake_quant(x, th, CFG8))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0, 1.0])

    def test_pinned_threshold_gradient_unsaturated(self):
        # x=0.30, s=1: d/dz = ln2 * (0 - 0.30)
        th = ThresholdScalar(z=0.0)
        x = T.Tensor([0.30])
        T.backward(T.sum_all(fake_quant(x, th, CFG8)))
        assert th.grad == pytest.approx(-0.2079, abs=1e-4)

    def test_pinned_threshold_gradient_saturated(self):
        # x=10, s=1, b=4: d/dz = ln2 * 7
        th = ThresholdScalar(z=0.0)
        x = T.Tensor([10.0])
        T.backward(T.sum_all(fake_quant(x, th, CFG4)))
        assert th.grad == pytest.approx(4.852, abs=1e-3)

    def test_formula_matches_independent_reimplementation_exactly(self):
        rng = np.random.default_rng(37)
        vals = rng.normal(scale=2.0, size=33).astype(np.float32)
        s = 2.0 ** -1.5
        th = ThresholdScalar(z=-1.5)
        x = T.Tensor(vals)
        T.backward(T.sum_all(fake_quant(x, th, CFG4)))

        locs = []
        for v in vals.astype(np.float64):
            q = np.rint(v / s)
            if -7 <= q <= 7:
                locs.append((s * math.log(2.0)) * (q - v / s))
            else:
                locs.append((s * math.log(2.0)) * np.clip(q, -7, 7))
        expected = float(np.sum(np.array(locs, dtype=np.float64)))
        assert th.grad == expected  # bit-exact, both sides pure float64

    def test_frozen_threshold_receives_no_gradient(self):
        th = ThresholdScalar(z=0.0, frozen=True)
        x = T.Tensor([0.30, 5.0])
        T.backward(T.sum_all(fake_quant(x, th, CFG8)))
        assert th.grad == 0.0
        assert x.grad is not None  # data path still flows

    def test_gradients_accumulate_over_calls(self):
        th = ThresholdScalar(z=0.0)
        for _ in range(2):
            T.backward(T.sum_all(fake_quant(T.Tensor([0.30]), th, CFG8)))
        assert th.grad == pytest.approx(2 * -0.20794415, abs=1e-6)
        th.zero_grad()
        assert th.grad == 0.0


class TestThresholdGradientHelper:
    def test_saturated_branch_matches_true_derivative(self):
        # with every element clipped, the forward is exactly s * (+-p):
        # smooth in z, so plain finite differences are a valid oracle
        x = np.array([300.0, -500.0, 420.0])

        def forward(zv):
            s = 2.0 ** zv
            return s * np.clip(np.rint(x / s), -127, 127)

        h = 1e-7
        fd = (forward(h) - forward(-h)) / (2 * h)
        np.testing.assert_allclose(threshold_gradient(x, 1.0, CFG8), fd, rtol=1e-5)

    def test_gradient_sign_matches_smoothed_objective(self):
        # the unsaturated branch is a straight-through surrogate, so a
        # pointwise FD cannot apply; instead check the descent direction
        # of the quantization MSE against a wide-window secant, which
        # averages over the rounding staircase
        rng = np.random.default_rng(47)
        x = rng.standard_t(df=3, size=4000)

        def mse(zv):
            s = 2.0 ** zv
            y = s * np.clip(np.rint(x / s), -127, 127)
            return float(np.mean((y - x) ** 2))

        def dmse(zv):
            s = 2.0 ** zv
            y = s * np.clip(np.rint(x / s), -127, 127)
            return float(np.mean(2.0 * (y - x) * threshold_gradient(x, s, CFG8)))

        for z in np.linspace(-7.1, 0.9, 33):
            wide = (mse(z + 0.25) - mse(z - 0.25)) / 0.5
            if abs(wide) < 1e-6:
                continue
            assert np.sign(dmse(z)) == np.sign(wide), f"direction flipped at z={z}"

    def test_descent_recovers_mse_optimal_threshold(self):
        # the estimator's job: gradient steps on z should land near the
        # grid-searched MSE minimizer from either side
        rng = np.random.default_rng(47)
        x = rng.standard_t(df=3, size=4000)

        def mse(zv):
            s = 2.0 ** zv
            y = s * np.clip(np.rint(x / s), -127, 127)
            return float(np.mean((y - x) ** 2))

        grid = np.linspace(-12, 4, 161)
        scores = [mse(z) for z in grid]
        z_star = grid[int(np.argmin(scores))]

        for z0 in (z_star - 3.0, z_star + 3.0):
            z = z0
            for _ in range(600):
                s = 2.0 ** z
                y = s * np.clip(np.rint(x / s), -127, 127)
                g = float(np.mean(2.0 * (y - x) * threshold_gradient(x, s, CFG8)))
                z -= 0.02 * np.sign(g)
            assert abs(z - z_star) < 0.3
            assert mse(z) <= 1.2 * min(scores)


class TestPowerOfTwoScalars:
    def test_forward_scale_snaps(self):
        cfg = QuantConfig(bits=8, power_of_two_scalars=True)
        th = ThresholdScalar(z=-1.4)
        assert th.forward_scale(cfg) == 0.5
        y = fake_quant(T.Tensor([0.6]), th, cfg)
        np.testing.assert_allclose(y.data, [0.5])  # 0.6/0.5 rounds to 1 on the 0.5 grid

    def test_gradient_still_reaches_continuous_z(self):
        cfg = QuantConfig(bits=8, power_of_two_scalars=True)
        th = ThresholdScalar(z=-1.4)
        T.backward(T.sum_all(fake_quant(T.Tensor([0.30]), th, cfg)))
        assert th.grad != 0.0


class TestRangePreservingFakeQuant:
    def test_grid_step_follows_max_abs(self):
        x = T.Tensor([1.27, -0.635, 0.3])
        y = fake_quant_range_preserving(x, CFG8)
        np.testing.assert_allclose(y.data, [1.27, -0.635, 0.30], atol=0.006)
        # outputs live on the 0.01 grid
        np.testing.assert_allclose(y.data / 0.01, np.round(y.data / 0.01), atol=1e-4)

    def test_never_saturates_so_gradient_is_identity(self):
        rng = np.random.default_rng(43)
        x = T.Tensor(rng.normal(scale=50.0, size=64))
        y = fake_quant_range_preserving(x, CFG8)
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, np.ones(64, dtype=np.float32))

    def test_zero_tensor_passes_through(self):
        y = fake_quant_range_preserving(T.Tensor(np.zeros(5)), CFG8)
        np.testing.assert_array_equal(y.data, np.zeros(5))

    @given(hnp.arrays(np.float32, st.integers(1, 48),
                      elements=st.floats(-1e3, 1e3, width=32)))
    @settings(max_examples=60, deadline=None)
    def test_reconstruction_within_half_step(self, vals):
        x = T.Tensor(vals)
        y = fake_quant_range_preserving(x, CFG8)
        s = range_scalar_signed(vals, CFG8)
        err = np.abs(y.data.astype(np.float64) - vals.astype(np.float64))
        assert np.all(err <= s / 2 + 1e-9)
