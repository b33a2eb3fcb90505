import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostsa.adder import AdderFilterBank, adder_conv2d, adder_conv2d_backward, adder_lr_scale
from ghostsa.core import ConvGeometry
from ghostsa.exceptions import DimensionError, ValidationError

from oracles import central_difference, naive_adder2d


def bank_for(geom, rng, bias=True):
    w = rng.standard_normal(geom.weight_shape).astype(np.float32)
    b = rng.standard_normal(geom.out_channels).astype(np.float32) if bias else None
    return AdderFilterBank(geom, w, b)


class TestForward:
    def test_patch_equal_to_filter_is_zero(self):
        w = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        out = adder_conv2d(w.copy(), AdderFilterBank(ConvGeometry(1, 1, 3), w))
        assert out[0, 0, 0, 0] == 0.0

    def test_single_term(self):
        bank = AdderFilterBank(ConvGeometry(1, 1, 1), np.ones((1, 1, 1, 1)))
        assert adder_conv2d(np.full((1, 1, 1, 1), 3.0), bank)[0, 0, 0, 0] == -2.0

    def test_pointwise_matches_patch_scan(self):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(4, 8, 1)
        bank = bank_for(geom, rng)
        x = rng.standard_normal((1, 4, 5, 5)).astype(np.float32)
        ref = naive_adder2d(x, bank.weight, bank.bias)
        assert np.max(np.abs(adder_conv2d(x, bank) - ref)) < 1e-5

    @pytest.mark.parametrize("k,s,p,g", [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 0, 2), (1, 2, 0, 4)])
    def test_general_geometry(self, k, s, p, g):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(4, 8, k, s, p, g)
        bank = bank_for(geom, rng)
        x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        ref = naive_adder2d(x, bank.weight, bank.bias, s, p, g)
        assert np.max(np.abs(adder_conv2d(x, bank) - ref)) < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.integers(1, 4), o=st.integers(1, 4),
           k=st.sampled_from([1, 3]), h=st.integers(3, 6))
    def test_output_bounded_by_bias(self, seed, c, o, k, h):
        rng = np.random.default_rng(seed)
        geom = ConvGeometry(c, o, k, 1, k // 2)
        bank = bank_for(geom, rng)
        out = adder_conv2d(rng.standard_normal((1, c, h, h)) * 10, bank)
        assert np.all(out <= bank.bias[None, :, None, None] + 1e-6)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-5, 5))
    def test_translation_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        geom = ConvGeometry(3, 4, 3)
        bank = bank_for(geom, rng, bias=False)
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        moved = AdderFilterBank(geom, bank.weight + np.float32(shift))
        diff = adder_conv2d(x + np.float32(shift), moved) - adder_conv2d(x, bank)
        assert np.max(np.abs(diff)) < 1e-4

    def test_shape_mismatch(self):
        bank = bank_for(ConvGeometry(2, 2, 1), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            adder_conv2d(np.zeros((1, 3, 2, 2)), bank)

    def test_bank_shape_checked(self):
        with pytest.raises(DimensionError):
            AdderFilterBank(ConvGeometry(2, 2, 1), np.zeros((2, 2, 3, 3)))


class TestBackward:
    def test_kink_gives_zero_weight_grad(self):
        w = np.full((1, 1, 1, 1), 0.5, np.float32)
        x = np.full((1, 1, 3, 3), 0.5, np.float32)
        _, gw, _ = adder_conv2d_backward(x, AdderFilterBank(ConvGeometry(1, 1, 1), w), np.ones((1, 1, 3, 3)))
        assert gw[0, 0, 0, 0] == 0.0

    def test_single_element_rule(self):
        bank = AdderFilterBank(ConvGeometry(1, 1, 1), np.ones((1, 1, 1, 1)))
        gx, gw, gb = adder_conv2d_backward(np.full((1, 1, 1, 1), 3.0), bank, np.ones((1, 1, 1, 1)))
        assert (gw.item(), gx.item(), gb.item()) == (1.0, -1.0, 1.0)

    def test_input_grad_clipped_versus_exact(self):
        bank = AdderFilterBank(ConvGeometry(1, 1, 1), np.ones((1, 1, 1, 1)))
        x = np.full((1, 1, 1, 1), 1.25)
        clipped, _, _ = adder_conv2d_backward(x, bank, np.ones((1, 1, 1, 1)))
        exact, _, _ = adder_conv2d_backward(x, bank, np.ones((1, 1, 1, 1)), clip_input_grad=False)
        assert clipped.item() == pytest.approx(-0.25)
        assert exact.item() == -1.0

    @pytest.mark.parametrize("k,s,p,g", [(1, 1, 0, 1), (3, 1, 1, 1), (3, 2, 1, 2)])
    def test_finite_differences_away_from_kinks(self, k, s, p, g):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(4, 4, k, s, p, g)
        # values on a coarse grid with offsets keep every |x - w| > 0.1
        x = rng.integers(-5, 5, size=(1, 4, 5, 5)) + 0.0
        w = rng.integers(-5, 5, size=geom.weight_shape) + 0.5
        b = np.zeros(4)
        dy = rng.standard_normal(geom.output_shape(x.shape))
        _, gw, _ = adder_conv2d_backward(x, AdderFilterBank(geom, w, b), dy)
        loss = lambda: float((naive_adder2d(x, w, b, s, p, g) * dy).sum())  # noqa: E731
        for idx in [(0, 0, 0, 0), (3, 0, k - 1, 0), (2, 1, 0, k - 1)]:
            fd = central_difference(loss, w, idx, 1e-3)
            assert abs(gw[idx] - fd) <= 1e-3 * max(1.0, abs(fd))

    def test_exact_input_grad_finite_differences(self):
        rng = np.random.default_rng(42)
        geom = ConvGeometry(2, 3, 3, 1, 1)
        x = rng.integers(-3, 3, size=(1, 2, 4, 4)) + 0.25
        w = rng.integers(-3, 3, size=geom.weight_shape) + 0.75
        dy = rng.standard_normal((1, 3, 4, 4))
        gx, _, _ = adder_conv2d_backward(x, AdderFilterBank(geom, w), dy, clip_input_grad=False)
        loss = lambda: float((naive_adder2d(x, w, None, 1, 1) * dy).sum())  # noqa: E731
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3)]:
            assert gx[idx] == pytest.approx(central_difference(loss, x, idx), rel=1e-3, abs=1e-4)

    def test_grad_shape_checked(self):
        bank = bank_for(ConvGeometry(1, 1, 1), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            adder_conv2d_backward(np.zeros((1, 1, 3, 3)), bank, np.zeros((1, 1, 2, 2)))


class TestLrScale:
    def test_zero_grad(self):
        assert not adder_lr_scale(np.zeros(5), 0.1).any()

    def test_ones(self):
        np.testing.assert_allclose(adder_lr_scale(np.ones(4), 1.0), np.ones(4), rtol=1e-7)

    def test_scale_invariant(self):
        g = np.random.default_rng(42).standard_normal(20)
        np.testing.assert_allclose(adder_lr_scale(10 * g, 0.3), adder_lr_scale(g, 0.3), rtol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.floats(0.01, 2.0), st.integers(0, 1000))
    def test_norm_is_eta_sqrt_n(self, n, eta, seed):
        g = np.random.default_rng(seed).standard_normal(n) + 0.1
        step = adder_lr_scale(g, eta)
        norm = np.linalg.norm(g)
        assert np.linalg.norm(step) == pytest.approx(eta * np.sqrt(n) * norm / (norm + 1e-8), rel=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            adder_lr_scale(np.zeros(0), 0.1)
