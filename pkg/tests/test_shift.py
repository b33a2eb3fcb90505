import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostsa.core import ConvGeometry, conv2d, conv2d_backward
from ghostsa.exceptions import DimensionError, ValidationError
from ghostsa.shift import (
    ShiftFilterBank,
    ShiftWeight,
    densify,
    quantize_shift,
    quantize_shift_array,
    shift_conv2d,
    shift_conv2d_backward,
)

from oracles import central_difference, naive_conv2d, scalar_shift_quantize

finite = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False, allow_infinity=False)


class TestQuantize:
    def test_zero(self):
        w = quantize_shift(0.0)
        assert (w.s, w.value) == (0, 0.0)

    def test_exact_power(self):
        w = quantize_shift(-0.25)
        assert (w.s, w.p, w.value) == (-1, -2, -0.25)

    def test_rounds_in_log_space(self):
        w = quantize_shift(0.75)
        assert (w.s, w.p, w.value) == (1, 0, 1.0)

    def test_clamps_to_range(self):
        assert quantize_shift(1e6).p == 8
        assert quantize_shift(3e-3).p == -8

    def test_zero_threshold(self):
        assert quantize_shift(2.0 ** -9 * 0.99).s == 0
        assert quantize_shift(2.0 ** -9).s == 1

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValidationError):
            quantize_shift(bad)

    def test_array_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            quantize_shift_array(np.array([1.0, np.nan]))

    def test_bad_sign(self):
        with pytest.raises(ValidationError):
            ShiftWeight(2, 0)

    def test_custom_range(self):
        w = quantize_shift(100.0, p_min=-2, p_max=2)
        assert w.p == 2

    @settings(max_examples=300, deadline=None)
    @given(finite)
    def test_matches_brute_force(self, v):
        w = quantize_shift(v)
        assert (w.s, w.p) == scalar_shift_quantize(v)

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from([-1, 1]), st.integers(-8, 8))
    def test_idempotent_on_powers_of_two(self, s, p):
        w = quantize_shift(s * 2.0 ** p)
        assert (w.s, w.p) == (s, p)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=2.0 ** -8, max_value=2.0 ** 8))
    def test_error_bound(self, v):
        ratio = quantize_shift(v).value / v
        assert 2 ** -0.5 - 1e-9 <= ratio <= 2 ** 0.5 + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(finite)
    def test_sign_symmetric(self, v):
        a, b = quantize_shift(v), quantize_shift(-v)
        assert b.value == -a.value
        assert (-a).s == b.s and (-a).p == b.p

    @settings(max_examples=50, deadline=None)
    @given(st.integers(-1, 1), st.integers(-8, 8))
    def test_value_exact_in_float32(self, s, p):
        assert float(densify(np.int8(s), np.int8(p))) == s * 2.0 ** p


def random_bank(rng, geom, bias=True):
    sign = rng.integers(-1, 2, size=geom.weight_shape)
    exps = rng.integers(-8, 9, size=geom.weight_shape)
    b = rng.standard_normal(geom.out_channels).astype(np.float32) if bias else None
    return ShiftFilterBank(geom, sign, exps, b)


class TestShiftConv:
    def test_left_shift_doubles(self):
        bank = ShiftFilterBank(ConvGeometry(1, 1, 1), [[[[1]]]], [[[[1]]]])
        for method in ("dense", "exponent"):
            assert shift_conv2d(np.full((1, 1, 1, 1), 3.0), bank, method)[0, 0, 0, 0] == 6.0

    def test_unit_weight_is_identity(self):
        x = np.random.default_rng(42).standard_normal((2, 1, 5, 5)).astype(np.float32)
        bank = ShiftFilterBank(ConvGeometry(1, 1, 1), [[[[1]]]], [[[[0]]]])
        np.testing.assert_array_equal(shift_conv2d(x, bank, "exponent"), x)

    @pytest.mark.parametrize("k,s,p,g", [(1, 1, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 1, 4)])
    def test_exponent_bit_identical_to_direct_conv(self, k, s, p, g):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(4, 8, k, s, p, g)
        bank = random_bank(rng, geom)
        x = rng.standard_normal((2, 4, 7, 7)).astype(np.float32)
        out = shift_conv2d(x, bank, "exponent")
        ref = conv2d(x, densify(bank.sign, bank.exponent), bank.bias, geom, method="direct")
        assert np.array_equal(out, ref)

    def test_dense_method_matches_oracle(self):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(3, 5, 3, 1, 1)
        bank = random_bank(rng, geom)
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        ref = naive_conv2d(x, bank.dense(), bank.bias, 1, 1)
        np.testing.assert_allclose(shift_conv2d(x, bank, "dense"), ref, rtol=1e-5, atol=1e-5)

    def test_shape_mismatch(self):
        bank = random_bank(np.random.default_rng(0), ConvGeometry(2, 2, 1))
        with pytest.raises(DimensionError):
            shift_conv2d(np.zeros((1, 3, 4, 4)), bank, "exponent")

    def test_bank_shape_checked(self):
        with pytest.raises(DimensionError):
            ShiftFilterBank(ConvGeometry(2, 2, 1), np.zeros((2, 2, 3, 3)), np.zeros((2, 2, 3, 3)))

    def test_from_proxy(self):
        bank = ShiftFilterBank.from_proxy(np.full((1, 1, 1, 1), 0.75), ConvGeometry(1, 1, 1))
        assert bank.dense()[0, 0, 0, 0] == 1.0

    def test_unknown_method(self):
        bank = random_bank(np.random.default_rng(0), ConvGeometry(1, 1, 1))
        with pytest.raises(ValidationError):
            shift_conv2d(np.zeros((1, 1, 2, 2)), bank, "table")


class TestShiftBackward:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.geom = ConvGeometry(3, 4, 3, 1, 1)
        self.bank = random_bank(rng, self.geom)
        self.x = rng.standard_normal((2, 3, 5, 5))
        self.dy = rng.standard_normal((2, 4, 5, 5))

    def test_zero_upstream(self):
        gx, gp, gb = shift_conv2d_backward(self.x, self.bank, np.zeros_like(self.dy))
        assert not gx.any() and not gp.any() and not gb.any()

    def test_input_grad_finite_differences(self):
        w = self.bank.dense().astype(np.float64)
        gx, _, _ = shift_conv2d_backward(self.x, self.bank, self.dy)
        loss = lambda: float((naive_conv2d(self.x, w, None, 1, 1) * self.dy).sum())  # noqa: E731
        for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 2, 2)]:
            fd = central_difference(loss, self.x, idx)
            assert abs(gx[idx] - fd) <= 1e-3 * max(1.0, abs(fd))

    def test_proxy_grad_is_dense_weight_grad(self):
        x32, dy32 = self.x.astype(np.float32), self.dy.astype(np.float32)
        _, gp, _ = shift_conv2d_backward(x32, self.bank, dy32)
        _, gw, _ = conv2d_backward(x32, self.bank.dense(), dy32, self.geom)
        assert np.array_equal(gp, gw)
