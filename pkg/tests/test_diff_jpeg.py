"""Tests for the differentiable surrogate: forward consistency and gradients."""

import numpy as np
import pytest

from src.models.errors import NonFiniteError
from src.models.experiment import LossWeights
from src.models.image import ImagePlanes, QuantTablePair
from src.models.params import AttentionMaps, SurrogateParams
from src.services.diff_jpeg import (
    attention_summary,
    round_ste,
    smoothed_reconstruction,
    surrogate_backward,
    surrogate_forward,
)
from src.services.jfif_codec import quantize_coefficients, reconstruct
from src.services.optimizer import finite_difference_check
from src.services.transforms import forward_dct
from tests.conftest import make_mid_range, make_natural

S = 1e-5


def integer_params(rng: np.random.Generator, low: int = 1, high: int = 256) -> SurrogateParams:
    return SurrogateParams(
        tables=QuantTablePair(
            luma=rng.integers(low, high, size=(8, 8)).astype(np.float64),
            chroma=rng.integers(low, high, size=(8, 8)).astype(np.float64),
        )
    )


def random_attention(rng: np.random.Generator, grid: tuple, spread: float = 1.0) -> AttentionMaps:
    shape = grid + (8, 8)
    return AttentionMaps(
        logits_luma=rng.normal(0.0, spread, size=shape),
        logits_chroma=rng.normal(0.0, spread, size=shape),
    )


class TestRoundSte:

    def test_integer_input(self):
        value, slope = round_ste(2.0)
        assert value == 2.0 and slope == 0.0

    def test_fractional_input(self):
        value, slope = round_ste(0.3)
        assert value == 0.0
        assert slope == pytest.approx(0.27)

    def test_negative_tie(self):
        value, slope = round_ste(-2.5)
        assert value == -3.0
        assert slope == pytest.approx(0.75)

    def test_slope_nonnegative(self, rng):
        _, slope = round_ste(rng.normal(0, 10, size=1000))
        assert slope.min() >= 0.0 and slope.max() <= 0.75 + 1e-12


class TestSurrogateForward:

    def test_matches_codec_quantization(self, rng):
        for seed in range(20):
            image = ImagePlanes.from_array(make_natural(40, 80, seed=seed))
            params = integer_params(rng)
            _, z, _ = surrogate_forward(image, params)
            expected = quantize_coefficients(forward_dct(image).coeffs, params.tables)
            assert z == expected

    def test_reconstruction_close_to_decoder(self, natural_image, rng):
        params = integer_params(rng, 2, 30)
        x_hat, z, _ = surrogate_forward(natural_image, params)
        decoded = reconstruct(z, params.tables, natural_image.width, natural_image.height)
        assert np.abs(x_hat.pixels - decoded.pixels).max() <= 3.0

    def test_scaled_tables_are_divided_by_s(self, natural_image):
        unit = SurrogateParams(tables=QuantTablePair(luma=np.full((8, 8), 12.0), chroma=np.full((8, 8), 20.0)))
        scaled = SurrogateParams(
            tables=QuantTablePair(luma=np.full((8, 8), 12.0 * S), chroma=np.full((8, 8), 20.0 * S), scale_s=S)
        )
        np.testing.assert_allclose(
            surrogate_forward(natural_image, unit)[0].pixels,
            surrogate_forward(natural_image, scaled)[0].pixels,
            atol=1e-9,
        )

    def test_attention_near_zero_gives_gray(self, natural_image):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        attention = AttentionMaps(logits_luma=np.full(grid + (8, 8), -40.0), logits_chroma=np.full(grid + (8, 8), -40.0))
        params = SurrogateParams(
            tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))), attention=attention
        )
        x_hat, z, _ = surrogate_forward(natural_image, params)
        assert not z.coeffs.any()
        np.testing.assert_allclose(x_hat.pixels, 128.0, atol=1e-9)

    def test_unit_tables_on_constant_image(self):
        image = ImagePlanes.from_array(np.full((16, 16, 3), 173.0))
        params = SurrogateParams(tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))))
        x_hat, _, _ = surrogate_forward(image, params)
        assert np.abs(x_hat.pixels - 173.0).max() <= 1.0

    def test_constant_image_only_dc(self):
        image = ImagePlanes.from_array(np.full((8, 8, 3), 200.0))
        params = SurrogateParams(tables=QuantTablePair(luma=np.full((8, 8), 16.0), chroma=np.full((8, 8), 16.0)))
        x_hat, z, _ = surrogate_forward(image, params)
        ac = z.coeffs.copy()
        ac[..., 0, 0] = 0
        assert not ac.any()
        assert np.abs(x_hat.pixels - 200.0).max() <= 8.0

    def test_attenuation_is_monotone(self, natural_image, rng):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        tables = QuantTablePair(luma=np.full((8, 8), 3.0), chroma=np.full((8, 8), 3.0))
        attention = random_attention(rng, grid)
        _, z_before, _ = surrogate_forward(natural_image, SurrogateParams(tables=tables, attention=attention))
        lowered = attention.logits_luma.copy()
        lowered[1, 2] -= 2.0
        reduced = AttentionMaps(logits_luma=lowered, logits_chroma=attention.logits_chroma)
        _, z_after, _ = surrogate_forward(natural_image, SurrogateParams(tables=tables, attention=reduced))
        assert np.all(np.abs(z_after.coeffs[0, 1, 2]) <= np.abs(z_before.coeffs[0, 1, 2]))

    def test_attention_grid_mismatch(self, natural_image, rng):
        params = SurrogateParams(
            tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))),
            attention=random_attention(rng, (1, 1)),
        )
        with pytest.raises(ValueError):
            surrogate_forward(natural_image, params)

    def test_non_finite_detected(self, natural_image):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        logits = np.zeros(grid + (8, 8))
        logits[2, 3, 0, 0] = np.nan
        params = SurrogateParams(
            tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))),
            attention=AttentionMaps(logits_luma=logits, logits_chroma=np.zeros(grid + (8, 8))),
        )
        with pytest.raises(NonFiniteError) as exc:
            surrogate_forward(natural_image, params)
        assert exc.value.index == (2, 3)
        assert "Y" in str(exc.value)

    def test_smooth_forward_differs_only_by_cubic_term(self, natural_image, rng):
        params = integer_params(rng, 4, 40)
        hard, _, _ = surrogate_forward(natural_image, params)
        soft, _, tape = surrogate_forward(natural_image, params, smooth=True)
        assert tape.smooth
        # |u - r|^3 <= 1/8 per coefficient, times at most 40 per step
        assert np.abs(hard.pixels - soft.pixels).max() < 40.0
        assert not np.array_equal(hard.pixels, soft.pixels)


class TestSurrogateBackward:

    def test_zero_upstream(self, natural_image, rng):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        params = SurrogateParams(tables=integer_params(rng, 2, 40).tables, attention=random_attention(rng, grid))
        _, _, tape = surrogate_forward(natural_image, params)
        grads = surrogate_backward(tape, np.zeros_like(natural_image.pixels))
        for g in grads.groups().values():
            assert not g.any()
        assert set(grads.groups()) == {"q_luma", "q_chroma", "logits_luma", "logits_chroma"}

    def test_no_attention_gradients_without_attention(self, natural_image, rng):
        _, _, tape = surrogate_forward(natural_image, integer_params(rng, 2, 40))
        grads = surrogate_backward(tape, np.ones_like(natural_image.pixels))
        assert grads.d_logits_luma is None and grads.d_logits_chroma is None

    def test_shape_mismatch(self, natural_image, rng):
        _, _, tape = surrogate_forward(natural_image, integer_params(rng))
        with pytest.raises(ValueError):
            surrogate_backward(tape, np.zeros((8, 8, 3)))

    def test_scale_divides_table_gradient(self, natural_image):
        unit = SurrogateParams(tables=QuantTablePair(luma=np.full((8, 8), 7.0), chroma=np.full((8, 8), 9.0)))
        scaled = SurrogateParams(
            tables=QuantTablePair.from_effective(np.full((8, 8), 7.0), np.full((8, 8), 9.0), S)
        )
        upstream = np.ones_like(natural_image.pixels)
        g_unit = surrogate_backward(surrogate_forward(natural_image, unit)[2], upstream)
        g_scaled = surrogate_backward(surrogate_forward(natural_image, scaled)[2], upstream)
        np.testing.assert_allclose(g_scaled.d_q_luma, g_unit.d_q_luma / S, rtol=1e-6, atol=1e-6)

    def test_deterministic(self, natural_image, rng):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        params = SurrogateParams(tables=integer_params(rng, 2, 40).tables, attention=random_attention(rng, grid))
        upstream = rng.normal(size=natural_image.pixels.shape)
        first = surrogate_backward(surrogate_forward(natural_image, params)[2], upstream)
        second = surrogate_backward(surrogate_forward(natural_image, params)[2], upstream)
        for key, g in first.groups().items():
            np.testing.assert_array_equal(g, second.groups()[key])


class TestGradientCheck:

    def test_matches_finite_differences(self, rng):
        image = ImagePlanes.from_array(make_mid_range(24, 24, seed=7))
        tables = QuantTablePair.from_effective(
            rng.uniform(4.0, 30.0, size=(8, 8)), rng.uniform(4.0, 30.0, size=(8, 8)), S
        )
        params = SurrogateParams(tables=tables, attention=random_attention(rng, (3, 3)))
        weights = LossWeights(**{"lambda": 1e-2}, alpha=1.0, beta=1.0)
        report = finite_difference_check(image, params, weights, num_coords=1000, seed=3)
        assert report.checked >= 700
        assert report.max_rel_error < 1e-4, report.worst

    def test_tables_only(self, rng):
        image = ImagePlanes.from_array(make_mid_range(16, 16, seed=11))
        tables = QuantTablePair.from_effective(
            rng.uniform(4.0, 30.0, size=(8, 8)), rng.uniform(4.0, 30.0, size=(8, 8)), S
        )
        report = finite_difference_check(image, SurrogateParams(tables=tables), LossWeights(**{"lambda": 1e-1}))
        assert report.checked + report.skipped == 128
        assert report.max_rel_error < 1e-4, report.worst


class TestSmoothedReconstruction:

    def test_identity_without_attention(self):
        image = ImagePlanes.from_array(make_mid_range(16, 24, seed=2))
        params = SurrogateParams(tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))))
        out = smoothed_reconstruction(image, params)
        np.testing.assert_allclose(out.pixels, image.pixels, atol=0.05)

    def test_half_attention_shrinks_contrast(self, natural_image):
        grid = (natural_image.blocks_y, natural_image.blocks_x)
        params = SurrogateParams(
            tables=QuantTablePair(luma=np.ones((8, 8)), chroma=np.ones((8, 8))),
            attention=AttentionMaps.neutral(*grid),
        )
        out = smoothed_reconstruction(natural_image, params)
        assert np.std(out.pixels - 128.0) < np.std(natural_image.pixels - 128.0)


class TestAttentionSummary:

    def test_shape_and_range(self, rng):
        summary = attention_summary(random_attention(rng, (4, 5)))
        assert summary.shape == (2, 4, 5)
        assert summary.min() == pytest.approx(0.0) and summary.max() == pytest.approx(1.0)

    def test_flat_map_keeps_mean(self):
        summary = attention_summary(AttentionMaps.neutral(2, 3))
        np.testing.assert_allclose(summary, 0.5)
