"""Image ingestion: 8-bit RGB PNG and binary PPM (P6) files."""

import struct
from pathlib import Path
from typing import List, Union

import numpy as np
from loguru import logger
from PIL import Image, UnidentifiedImageError

from src.models.errors import ImageFormatError
from src.models.image import ImagePlanes

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
IMAGE_SUFFIXES = {".png", ".ppm"}

# PNG IHDR color types
PNG_GRAYSCALE = {0, 4}
PNG_RGB = 2
PNG_PALETTE = 3
PNG_RGBA = 6


def _check_png_header(path: Path, head: bytes) -> None:
    if len(head) < 26 or head[12:16] != b"IHDR":
        raise ImageFormatError(str(path), "corrupted PNG header")
    width, height, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    if color_type in PNG_GRAYSCALE:
        raise ImageFormatError(str(path), "grayscale images are not supported; convert to RGB")
    if color_type == PNG_RGBA:
        raise ImageFormatError(str(path), "images with an alpha channel are not supported")
    if color_type == PNG_RGB and bit_depth != 8:
        raise ImageFormatError(str(path), f"{bit_depth}-bit PNG is not supported (8-bit only)")
    if color_type not in (PNG_RGB, PNG_PALETTE):
        raise ImageFormatError(str(path), f"unknown PNG color type {color_type}")
    if width == 0 or height == 0:
        raise ImageFormatError(str(path), "empty image")


def _ppm_header_tokens(head: bytes, count: int) -> List[bytes]:
    tokens: List[bytes] = []
    for line in head.split(b"\n"):
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
        if len(tokens) >= count:
            break
    return tokens[:count]


def _check_ppm_header(path: Path, head: bytes) -> None:
    tokens = _ppm_header_tokens(head, 4)
    if not tokens or tokens[0] not in (b"P6", b"P5", b"P3"):
        raise ImageFormatError(str(path), "corrupted PPM header")
    if tokens[0] == b"P5":
        raise ImageFormatError(str(path), "grayscale images are not supported; convert to RGB")
    if tokens[0] == b"P3":
        raise ImageFormatError(str(path), "ASCII PPM (P3) is not supported; use binary P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ImageFormatError(str(path), "corrupted PPM header")
    if width <= 0 or height <= 0:
        raise ImageFormatError(str(path), "empty image")
    if maxval != 255:
        raise ImageFormatError(str(path), f"PPM maxval {maxval} is not supported (8-bit only)")


def read_rgb(path: Union[str, Path]) -> np.ndarray:
    """Decode a PNG or P6 PPM file to an (H, W, 3) float64 array."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(256)
    except OSError as e:
        raise ImageFormatError(str(path), f"cannot read file ({e})")

    if head.startswith(PNG_SIGNATURE):
        _check_png_header(path, head)
    elif head[:1] == b"P":
        _check_ppm_header(path, head)
    else:
        raise ImageFormatError(str(path), "unsupported format (expected PNG or binary PPM)")

    try:
        with Image.open(path) as im:
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(str(path), f"corrupted image data ({e})")
    return rgb


def load_image(path: Union[str, Path]) -> ImagePlanes:
    """
    Load an image and replicate-pad it to whole 8×8 blocks.

    Raises:
        ImageFormatError: unreadable, corrupt, grayscale or non-8-bit input
    """
    planes = ImagePlanes.from_array(read_rgb(path))
    logger.debug(
        f"Loaded {Path(path).name}: {planes.width}x{planes.height} "
        f"(pad {planes.pad_right}x{planes.pad_bottom})"
    )
    return planes


def save_rgb_png(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """Write an (H, W, 3) array in [0, 255] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.floor(np.asarray(pixels) + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    return path


def list_images(input_path: Union[str, Path]) -> List[Path]:
    """A single image file, or every PNG/PPM directly inside a directory, sorted by name."""
    input_path = Path(input_path)
    if input_path.is_file():
        return [input_path]
    if not input_path.is_dir():
        raise FileNotFoundError(f"input not found: {input_path}")
    return sorted(p for p in input_path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def image_id(path: Union[str, Path]) -> str:
    return Path(path).stem
