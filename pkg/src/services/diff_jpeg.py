"""
Differentiable surrogate of the JPEG encode/decode loop.

Forward pass uses true rounding so the quantized coefficients are exactly what
the codec writes; the backward pass differentiates the cubic rounding
surrogate round(u) + (u - round(u))^3 instead.
"""

from typing import Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.models.errors import NonFiniteError
from src.models.image import CHANNELS, ImagePlanes, QuantizedBlocks
from src.models.params import AttentionMaps, GradientSet, SurrogateParams
from src.services.transforms import (
    CHROMA_OFFSET,
    DCT_MATRIX,
    DCT_MATRIX_T,
    YCBCR_TO_RGB,
    blocks_to_planes,
    forward_dct,
    idct_8x8,
    round_half_away,
    split_blocks,
)


class SurrogateTape(BaseModel):
    """Intermediates of one forward pass, consumed by surrogate_backward."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coeffs: np.ndarray        # F, (3, N, M, 8, 8)
    attention: np.ndarray     # A, (3, N, M, 8, 8)
    tables: np.ndarray        # effective Q, (3, 8, 8)
    pre_round: np.ndarray     # u = F·A/Q
    rounded: np.ndarray       # round(u)
    dequant_input: np.ndarray  # Ẑ fed to dequantization
    ycbcr: np.ndarray         # IDCT output before clamping, (8N, 8M, 3)
    rgb_linear: np.ndarray    # color conversion before clamping
    scale_s: float
    has_attention: bool
    smooth: bool


def round_ste(x: Union[float, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    True rounding with the cubic surrogate's slope.

    Returns:
        (round-half-away(x), 3·(x - round(x))²)
    """
    x = np.asarray(x, dtype=np.float64)
    value = round_half_away(x)
    return value, 3.0 * (x - value) ** 2


def _check_finite(u: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(u))
    if bad.size:
        c, by, bx = (int(i) for i in bad[0][:3])
        raise NonFiniteError(f"surrogate pre-round values, channel {CHANNELS[c]}", (by, bx))


def surrogate_forward(
    x: ImagePlanes,
    params: SurrogateParams,
    smooth: bool = False,
) -> Tuple[ImagePlanes, QuantizedBlocks, SurrogateTape]:
    """
    Attention-weighted quantization followed by the standard decoder.

    Args:
        x: Padded RGB input
        params: Tables (effective values used) and optional attention
        smooth: Feed round(u) + (u - round(u))^3 to the decoder instead of
            round(u), making the forward pass match the backward pass
            (finite-difference checks)

    Returns:
        (x_hat, quantized coefficients, tape)
    """
    coeffs = forward_dct(x).coeffs
    attention = params.attention_stack(x.blocks_y, x.blocks_x)
    tables = params.table_stack()
    q = tables[:, None, None]

    # division (not multiplication by the reciprocal) keeps Ẑ bit-identical to quantize_block
    pre_round = coeffs * attention / q
    _check_finite(pre_round)
    rounded = round_half_away(pre_round)
    dequant_input = rounded + (pre_round - rounded) ** 3 if smooth else rounded

    ycbcr = blocks_to_planes(idct_8x8(dequant_input * q))
    rgb_linear = (np.clip(ycbcr, 0.0, 255.0) - CHROMA_OFFSET) @ YCBCR_TO_RGB.T
    x_hat = x.with_pixels(np.clip(rgb_linear, 0.0, 255.0))

    tape = SurrogateTape(
        coeffs=coeffs,
        attention=attention,
        tables=tables,
        pre_round=pre_round,
        rounded=rounded,
        dequant_input=dequant_input,
        ycbcr=ycbcr,
        rgb_linear=rgb_linear,
        scale_s=params.tables.scale_s,
        has_attention=params.attention is not None,
        smooth=smooth,
    )
    return x_hat, QuantizedBlocks(coeffs=rounded.astype(np.int64)), tape


def surrogate_backward(tape: SurrogateTape, upstream: np.ndarray) -> GradientSet:
    """
    Reverse-mode gradients of the surrogate with respect to θ.

    Args:
        tape: Record from the matching surrogate_forward
        upstream: ∂L/∂x̂ over the padded raster, (8N, 8M, 3)

    Returns:
        Gradients for the scaled table parameters and, when attention was
        used, for the attention logits
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.rgb_linear.shape:
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match raster {tape.rgb_linear.shape}"
        )

    rgb = tape.rgb_linear
    g_rgb = upstream * ((rgb >= 0.0) & (rgb <= 255.0))
    g_ycbcr = g_rgb @ YCBCR_TO_RGB
    g_ycbcr = g_ycbcr * ((tape.ycbcr >= 0.0) & (tape.ycbcr <= 255.0))

    g_samples = np.stack([split_blocks(g_ycbcr[..., c]) for c in range(3)])
    g_dequant = DCT_MATRIX @ g_samples @ DCT_MATRIX_T

    q = tape.tables[:, None, None]
    g_z = g_dequant * q
    g_q = np.sum(g_dequant * tape.dequant_input, axis=(1, 2))

    g_u = g_z * 3.0 * (tape.pre_round - tape.rounded) ** 2
    g_q -= np.sum(g_u * tape.pre_round / q, axis=(1, 2))

    # effective Q = param / s
    g_q = g_q / tape.scale_s
    grads = GradientSet(d_q_luma=g_q[0], d_q_chroma=g_q[1] + g_q[2])

    if tape.has_attention:
        g_a = g_u * tape.coeffs / q
        a = tape.attention
        sigmoid_slope = a * (1.0 - a)
        grads = GradientSet(
            d_q_luma=grads.d_q_luma,
            d_q_chroma=grads.d_q_chroma,
            d_logits_luma=g_a[0] * sigmoid_slope[0],
            d_logits_chroma=(g_a[1] + g_a[2]) * sigmoid_slope[1],
        )

    grads.check_finite()
    return grads


def smoothed_reconstruction(x: ImagePlanes, params: SurrogateParams) -> ImagePlanes:
    """Decode of the attention-edited coefficients without any quantization."""
    coeffs = forward_dct(x).coeffs * params.attention_stack(x.blocks_y, x.blocks_x)
    ycbcr = np.clip(blocks_to_planes(idct_8x8(coeffs)), 0.0, 255.0)
    rgb = (ycbcr - CHROMA_OFFSET) @ YCBCR_TO_RGB.T
    return x.with_pixels(np.clip(rgb, 0.0, 255.0))


def attention_summary(maps: AttentionMaps) -> np.ndarray:
    """
    Per-block mean attention for visualization.

    Returns:
        (2, N, M) array, luma then chroma, each min-max normalized to [0, 1].
        A map with no spread keeps its (already in-range) mean value.
    """
    summary = []
    for name, weights in (("luma", maps.luma), ("chroma", maps.chroma)):
        block_mean = weights.mean(axis=(2, 3))
        spread = block_mean.max() - block_mean.min()
        if spread > 0:
            block_mean = (block_mean - block_mean.min()) / spread
        logger.debug(f"Attention {name}: mean={weights.mean():.4f}, spread={spread:.4f}")
        summary.append(block_mean)
    return np.stack(summary)
