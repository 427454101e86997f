"""Pixel-domain and coefficient-domain transforms of baseline JPEG.

Everything here is vectorized over leading axes: a "block" argument may be a
single (8, 8) array or any stack (..., 8, 8).
"""

import numpy as np

from src.models.image import BLOCK, DctTensor, ImagePlanes, QuantTablePair

# JFIF (full-range BT.601) color matrices
RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])

LEVEL_SHIFT = 128.0

# Standard example tables (ITU-T T.81 Annex K)
ANNEX_K_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

ANNEX_K_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

# Natural (row-major) index of the k-th coefficient in zig-zag order
ZIGZAG_ORDER = np.array([
    0, 1, 8, 16, 9, 2, 3, 10,
    17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
])


def create_dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis: row u holds alpha(u)·cos((2x+1)uπ/2n)."""
    u = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    matrix = np.sqrt(2.0 / n) * np.cos((2 * x + 1) * u * np.pi / (2 * n))
    matrix[0, :] = 1.0 / np.sqrt(n)
    return matrix


DCT_MATRIX = create_dct_matrix()
DCT_MATRIX_T = DCT_MATRIX.T


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """
    Convert RGB samples (..., 3) to full-range YCbCr.

    No intermediate rounding: the result stays real-valued, clamped to [0, 255].
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    ycbcr = rgb @ RGB_TO_YCBCR.T + CHROMA_OFFSET
    return np.clip(ycbcr, 0.0, 255.0)


def ycbcr_to_rgb(ycbcr: np.ndarray) -> np.ndarray:
    """Inverse JFIF transform (..., 3) -> (..., 3), clamped to [0, 255]."""
    ycbcr = np.asarray(ycbcr, dtype=np.float64)
    rgb = (ycbcr - CHROMA_OFFSET) @ YCBCR_TO_RGB.T
    return np.clip(rgb, 0.0, 255.0)


def split_blocks(plane: np.ndarray) -> np.ndarray:
    """(8N, 8M) plane -> (N, M, 8, 8) blocks."""
    height, width = plane.shape
    return plane.reshape(height // BLOCK, BLOCK, width // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def merge_blocks(blocks: np.ndarray) -> np.ndarray:
    """(N, M, 8, 8) blocks -> (8N, 8M) plane."""
    n, m = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(n * BLOCK, m * BLOCK)


def image_to_blocks(image: ImagePlanes) -> np.ndarray:
    """YCbCr sample blocks of a padded raster, shape (3, N, M, 8, 8)."""
    ycbcr = rgb_to_ycbcr(image.pixels)
    return np.stack([split_blocks(ycbcr[..., c]) for c in range(3)])


def blocks_to_planes(blocks: np.ndarray) -> np.ndarray:
    """(3, N, M, 8, 8) -> (8N, 8M, 3)."""
    return np.stack([merge_blocks(blocks[c]) for c in range(3)], axis=-1)


def fdct_8x8(block: np.ndarray) -> np.ndarray:
    """Level shift by -128, then the orthonormal 2-D DCT-II."""
    shifted = np.asarray(block, dtype=np.float64) - LEVEL_SHIFT
    return DCT_MATRIX @ shifted @ DCT_MATRIX_T


def idct_8x8(coeffs: np.ndarray) -> np.ndarray:
    """Inverse 2-D DCT plus the +128 level shift. No clamping."""
    return DCT_MATRIX_T @ np.asarray(coeffs, dtype=np.float64) @ DCT_MATRIX + LEVEL_SHIFT


def forward_dct(image: ImagePlanes) -> DctTensor:
    return DctTensor(coeffs=fdct_8x8(image_to_blocks(image)))


def _check_table(table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.shape[-2:] != (BLOCK, BLOCK):
        raise ValueError(f"quantization table must be 8×8, got {table.shape}")
    if np.any(table < 1.0):
        raise ValueError("quantization table entries must be >= 1")
    return table


def quantize_block(coeffs: np.ndarray, table: np.ndarray) -> np.ndarray:
    """round(F / Q) entry-wise, ties away from zero."""
    table = _check_table(table)
    return round_half_away(np.asarray(coeffs, dtype=np.float64) / table).astype(np.int64)


def dequantize_block(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """z · Q entry-wise."""
    return np.asarray(z, dtype=np.float64) * np.asarray(table, dtype=np.float64)


def quality_to_tables(quality: int) -> QuantTablePair:
    """
    IJG quality scaling of the Annex K tables.

    Args:
        quality: Quality factor in [1, 100]

    Returns:
        Integer-valued tables (scale_s = 1)
    """
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in [1, 100], got {quality}")
    quality = int(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality

    def scaled(table: np.ndarray) -> np.ndarray:
        return np.clip((table * scale + 50) // 100, 1, 255).astype(np.float64)

    return QuantTablePair(luma=scaled(ANNEX_K_LUMA), chroma=scaled(ANNEX_K_CHROMA), scale_s=1.0)
