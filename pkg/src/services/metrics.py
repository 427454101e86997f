"""Distortion, rate and quality metrics, and the combined training objective."""

import math
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import ndimage
from scipy.stats import spearmanr

from src.models.errors import NonFiniteError
from src.models.experiment import LossReport, LossWeights
from src.models.image import ImagePlanes
from src.models.params import GradientSet, SurrogateParams
from src.services.transforms import rgb_to_ycbcr

Raster = Union[ImagePlanes, np.ndarray]
PerceptualMetric = Callable[[np.ndarray, np.ndarray], float]

# MS-SSIM defaults (Gaussian window, stabilizers, per-scale exponents)
MS_SSIM_WINDOW = 11
MS_SSIM_SIGMA = 1.5
MS_SSIM_K1 = 0.01
MS_SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE = MS_SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)  # 176
DATA_RANGE = 255.0

# Replaced only by register/clear; loss evaluation reads it and never writes it
_perceptual_metric: Optional[PerceptualMetric] = None


def _unpadded(image: Raster) -> np.ndarray:
    if isinstance(image, ImagePlanes):
        return image.cropped()
    return np.asarray(image, dtype=np.float64)


def _pair(x: Raster, x_hat: Raster) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _unpadded(x), _unpadded(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def mse(x: Raster, x_hat: Raster) -> float:
    """Mean squared error over unpadded pixels and all three RGB channels."""
    a, b = _pair(x, x_hat)
    return float(np.mean((a - b) ** 2))


def psnr(x: Raster, x_hat: Raster) -> float:
    """PSNR in dB for 8-bit data; identical images give +inf."""
    error = mse(x, x_hat)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE ** 2 / error)


def _gaussian_window() -> np.ndarray:
    coords = np.arange(MS_SSIM_WINDOW, dtype=np.float64) - MS_SSIM_WINDOW // 2
    window = np.exp(-(coords ** 2) / (2.0 * MS_SSIM_SIGMA ** 2))
    return window / window.sum()


def _filter_valid(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(plane, window, axis=0)
    out = ndimage.correlate1d(out, window, axis=1)
    r = len(window) // 2
    return out[r:-r, r:-r]


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> Tuple[float, float]:
    c1 = (MS_SSIM_K1 * DATA_RANGE) ** 2
    c2 = (MS_SSIM_K2 * DATA_RANGE) ** 2

    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a ** 2
    var_b = _filter_valid(b * b, window) - mu_b ** 2
    cov = _filter_valid(a * b, window) - mu_a * mu_b

    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(luminance * cs_map)), float(np.mean(cs_map))


def _downsample(plane: np.ndarray) -> np.ndarray:
    """2×2 mean pooling; a trailing odd row/column is dropped."""
    h, w = plane.shape[0] // 2 * 2, plane.shape[1] // 2 * 2
    p = plane[:h, :w]
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def ms_ssim(x: Raster, x_hat: Raster) -> float:
    """
    Five-scale MS-SSIM on the luma channel.

    Args:
        x: Reference RGB image
        x_hat: Distorted RGB image of the same size

    Returns:
        Score in [0, 1]; negative per-scale terms are clamped to zero
    """
    a, b = _pair(x, x_hat)
    height, width = a.shape[:2]
    if min(height, width) < MS_SSIM_MIN_SIDE:
        raise ValueError(
            f"MS-SSIM needs at least {MS_SSIM_MIN_SIDE}×{MS_SSIM_MIN_SIDE} pixels, "
            f"got {width}×{height}"
        )

    a = rgb_to_ycbcr(a)[..., 0]
    b = rgb_to_ycbcr(b)[..., 0]
    window = _gaussian_window()

    levels = len(MS_SSIM_WEIGHTS)
    score = 1.0
    for level, weight in enumerate(MS_SSIM_WEIGHTS):
        ssim_value, cs_value = _ssim_terms(a, b, window)
        if level < levels - 1:
            score *= max(cs_value, 0.0) ** weight
            a, b = _downsample(a), _downsample(b)
        else:
            score *= max(ssim_value, 0.0) ** weight
    return float(score)


def register_perceptual_metric(fn: PerceptualMetric) -> None:
    """Install a scorer d(x, x_hat) used for the γ term of the objective."""
    global _perceptual_metric
    _perceptual_metric = fn
    logger.info(f"Perceptual metric registered: {getattr(fn, '__name__', fn)}")
    logger.warning("Perceptual term adds to the loss value only; gradients ignore it")


def clear_perceptual_metric() -> None:
    global _perceptual_metric
    _perceptual_metric = None


def rate_loss(params: SurrogateParams, weights: LossWeights) -> Tuple[float, float]:
    """
    Regularization-based rate proxy.

    Returns:
        (α·Σ(1/Q_L + 1/Q_C), β·(mean A_L + mean A_C)); the attention term is 0
        when the parameters carry no attention
    """
    tables = params.tables
    rate_q = weights.alpha * float(
        np.sum(1.0 / tables.effective_luma) + np.sum(1.0 / tables.effective_chroma)
    )
    rate_attention = 0.0
    if params.attention is not None:
        rate_attention = weights.beta * float(
            np.mean(params.attention.luma) + np.mean(params.attention.chroma)
        )
    return rate_q, rate_attention


def total_loss(
    x: Raster,
    x_hat: Raster,
    params: SurrogateParams,
    weights: LossWeights,
    perceptual_metric: Optional[PerceptualMetric] = None,
) -> LossReport:
    """
    λ·mse + rate terms, plus γ·perceptual when γ > 0.

    The perceptual scorer is perceptual_metric when given, else the registered one.
    """
    if weights.lambda_ <= 0:
        raise ValueError("λ must be positive")
    distortion = mse(x, x_hat)
    rate_q, rate_attention = rate_loss(params, weights)
    total = weights.lambda_ * distortion + rate_q + rate_attention

    perceptual = 0.0
    if weights.gamma > 0:
        scorer = perceptual_metric or _perceptual_metric
        if scorer is None:
            raise ValueError("γ > 0 requires a perceptual metric")
        perceptual = float(scorer(_unpadded(x), _unpadded(x_hat)))
        total += weights.gamma * perceptual

    if not math.isfinite(total):
        raise NonFiniteError("total loss")
    return LossReport(
        total=total,
        distortion_mse=distortion,
        rate_q=rate_q,
        rate_attention=rate_attention,
        rate_total=rate_q + rate_attention,
        perceptual=perceptual,
    )


def mse_gradient(x: ImagePlanes, x_hat: ImagePlanes) -> np.ndarray:
    """∂mse/∂x̂ over the padded raster; the padding gets zero gradient."""
    grad = np.zeros_like(x_hat.pixels)
    h, w = x.height, x.width
    grad[:h, :w] = 2.0 * (x_hat.pixels[:h, :w] - x.pixels[:h, :w]) / (h * w * 3)
    return grad


def rate_gradients(params: SurrogateParams, weights: LossWeights) -> GradientSet:
    """Analytic gradient of rate_loss with respect to scaled tables and logits."""
    tables = params.tables
    s = tables.scale_s
    grads = GradientSet(
        d_q_luma=-weights.alpha / (tables.effective_luma ** 2 * s),
        d_q_chroma=-weights.alpha / (tables.effective_chroma ** 2 * s),
    )
    att = params.attention
    if att is None:
        return grads
    luma, chroma = att.luma, att.chroma
    return GradientSet(
        d_q_luma=grads.d_q_luma,
        d_q_chroma=grads.d_q_chroma,
        d_logits_luma=weights.beta / luma.size * luma * (1.0 - luma),
        d_logits_chroma=weights.beta / chroma.size * chroma * (1.0 - chroma),
    )


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation, or None when undefined (fewer than 3 points, constant input)."""
    if len(a) != len(b):
        raise ValueError("sequences must have equal length")
    if len(a) < 3:
        return None
    rho = float(spearmanr(a, b)[0])
    return None if math.isnan(rho) else rho
