"""JFIF container writing/parsing and the baseline encode/decode paths built on it."""

import struct
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.models.errors import JfifParseError, UnsupportedFeatureError
from src.models.image import BLOCK, ImagePlanes, JfifFile, QuantTablePair, QuantizedBlocks
from src.services.entropy_coder import (
    DEFAULT_DHT_SPECS,
    EntropyPayload,
    HuffmanTable,
    decode_entropy,
    encode_entropy,
)
from src.services.transforms import (
    ZIGZAG_ORDER,
    blocks_to_planes,
    dequantize_block,
    forward_dct,
    idct_8x8,
    quality_to_tables,
    quantize_block,
    round_half_away,
    ycbcr_to_rgb,
)


class Marker:
    """JPEG marker codes (second byte after 0xFF)"""
    SOI = 0xD8
    EOI = 0xD9
    APP0 = 0xE0
    DQT = 0xDB
    SOF0 = 0xC0
    DHT = 0xC4
    SOS = 0xDA
    DRI = 0xDD
    DAC = 0xCC
    COM = 0xFE


# Frame types other than baseline SOF0, by marker
UNSUPPORTED_FRAMES = {
    0xC1: "extended sequential (SOF1)",
    0xC2: "progressive (SOF2)",
    0xC3: "lossless (SOF3)",
    0xC5: "differential sequential (SOF5)",
    0xC6: "differential progressive (SOF6)",
    0xC7: "differential lossless (SOF7)",
    0xC9: "arithmetic-coded sequential (SOF9)",
    0xCA: "arithmetic-coded progressive (SOF10)",
    0xCB: "arithmetic-coded lossless (SOF11)",
    0xCD: "arithmetic-coded differential (SOF13)",
    0xCE: "arithmetic-coded differential progressive (SOF14)",
    0xCF: "arithmetic-coded differential lossless (SOF15)",
}

COMPONENT_IDS = (1, 2, 3)


class DecodedJfif(BaseModel):
    """What decode_jfif recovers from a stream."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    blocks: QuantizedBlocks
    tables: QuantTablePair
    width: int
    height: int


class EncodeResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    file: JfifFile
    blocks: QuantizedBlocks
    tables: QuantTablePair


# =============================================================================
# Writer
# =============================================================================

def _segment(marker: int, content: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(content) + 2) + content


def _app0_segment() -> bytes:
    content = b"JFIF\x00" + struct.pack(">BBBHHBB", 1, 1, 0, 1, 1, 0, 0)
    return _segment(Marker.APP0, content)


def _dqt_segment(table_id: int, table: np.ndarray) -> bytes:
    flat = table.astype(np.int64).reshape(64)[ZIGZAG_ORDER]
    return _segment(Marker.DQT, bytes([table_id]) + bytes(int(v) for v in flat))


def _sof0_segment(width: int, height: int) -> bytes:
    content = struct.pack(">BHHB", 8, height, width, 3)
    # 1x1 sampling on every component: no chroma subsampling
    content += bytes([1, 0x11, 0, 2, 0x11, 1, 3, 0x11, 1])
    return _segment(Marker.SOF0, content)


def _dht_segment(table_class: int, table_id: int, bits: List[int], values: List[int]) -> bytes:
    return _segment(Marker.DHT, bytes([(table_class << 4) | table_id]) + bytes(bits) + bytes(values))


def _sos_segment() -> bytes:
    content = bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])
    return _segment(Marker.SOS, content)


def _validate_integer_table(name: str, table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (BLOCK, BLOCK):
        raise ValueError(f"{name} table must be 8×8")
    if not np.array_equal(table, np.round(table)):
        raise ValueError(f"{name} table has non-integer entries; round it before writing")
    if table.min() < 1 or table.max() > 255:
        raise ValueError(f"{name} table entries must lie in [1, 255]")
    return table.astype(np.int64)


def write_jfif(payload: EntropyPayload, tables: QuantTablePair, width: int, height: int) -> JfifFile:
    """
    Assemble a baseline JFIF file around entropy-coded scan data.

    Args:
        payload: Scan data from encode_entropy
        tables: Integer-valued tables (effective values are written)
        width, height: Unpadded image dimensions

    Returns:
        JfifFile with the tables it records
    """
    if not (0 < width <= 0xFFFF and 0 < height <= 0xFFFF):
        raise ValueError(f"dimensions {width}×{height} not representable in SOF0")
    luma = _validate_integer_table("luma", tables.effective_luma)
    chroma = _validate_integer_table("chroma", tables.effective_chroma)

    parts = [
        bytes([0xFF, Marker.SOI]),
        _app0_segment(),
        _dqt_segment(0, luma),
        _dqt_segment(1, chroma),
        _sof0_segment(width, height),
        *(_dht_segment(*spec) for spec in DEFAULT_DHT_SPECS),
        _sos_segment(),
        payload.data,
        bytes([0xFF, Marker.EOI]),
    ]
    return JfifFile(
        data=b"".join(parts),
        luma_table=luma,
        chroma_table=chroma,
        width=width,
        height=height,
    )


# =============================================================================
# Parser
# =============================================================================

class _Cursor:
    """Bounds-checked big-endian reads over the file bytes."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def u8(self) -> int:
        if self.pos >= len(self.data):
            raise JfifParseError(self.pos, "unexpected end of file")
        value = self.data[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        return (self.u8() << 8) | self.u8()

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise JfifParseError(self.pos, f"segment needs {count} bytes, file is truncated")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk


def _read_marker(cur: _Cursor) -> int:
    start = cur.pos
    if cur.u8() != 0xFF:
        raise JfifParseError(start, "expected a marker")
    marker = cur.u8()
    while marker == 0xFF:  # fill bytes
        marker = cur.u8()
    return marker


def _parse_dqt(body: bytes, offset: int, tables: Dict[int, np.ndarray]) -> None:
    i = 0
    while i < len(body):
        precision, table_id = body[i] >> 4, body[i] & 0x0F
        if precision != 0:
            raise UnsupportedFeatureError("16-bit quantization tables are not supported")
        if i + 65 > len(body):
            raise JfifParseError(offset + i, "DQT segment truncated")
        natural = np.zeros(64, dtype=np.int64)
        natural[ZIGZAG_ORDER] = np.frombuffer(body[i + 1:i + 65], dtype=np.uint8)
        tables[table_id] = natural.reshape(BLOCK, BLOCK)
        i += 65


def _parse_dht(body: bytes, offset: int, dc: Dict[int, HuffmanTable], ac: Dict[int, HuffmanTable]) -> None:
    i = 0
    while i < len(body):
        if i + 17 > len(body):
            raise JfifParseError(offset + i, "DHT segment truncated")
        table_class, table_id = body[i] >> 4, body[i] & 0x0F
        bits = list(body[i + 1:i + 17])
        count = sum(bits)
        if i + 17 + count > len(body):
            raise JfifParseError(offset + i, "DHT symbol list truncated")
        table = HuffmanTable(bits, list(body[i + 17:i + 17 + count]))
        (dc if table_class == 0 else ac)[table_id] = table
        i += 17 + count


def decode_jfif(file: Union[JfifFile, bytes]) -> DecodedJfif:
    """
    Parse a baseline JFIF stream back into quantized blocks, tables and dimensions.

    Raises:
        UnsupportedFeatureError: progressive, arithmetic, subsampled, restart-marker
            or 12-bit streams
        JfifParseError: truncated or malformed stream (carries the byte offset)
    """
    data = file.data if isinstance(file, JfifFile) else bytes(file)
    cur = _Cursor(data)
    if _read_marker(cur) != Marker.SOI:
        raise JfifParseError(0, "missing SOI marker")

    qtables: Dict[int, np.ndarray] = {}
    dc_tables: Dict[int, HuffmanTable] = {}
    ac_tables: Dict[int, HuffmanTable] = {}
    frame: Optional[Tuple[int, int, List[int]]] = None
    blocks: Optional[QuantizedBlocks] = None

    while True:
        marker_at = cur.pos
        marker = _read_marker(cur)

        if marker == Marker.EOI:
            break
        if marker in UNSUPPORTED_FRAMES:
            raise UnsupportedFeatureError(f"{UNSUPPORTED_FRAMES[marker]} frames are not supported")
        if marker == Marker.DAC:
            raise UnsupportedFeatureError("arithmetic coding is not supported")
        if 0xD0 <= marker <= 0xD7:
            raise UnsupportedFeatureError("restart markers are not supported")

        length = cur.u16()
        if length < 2:
            raise JfifParseError(marker_at + 2, f"invalid segment length {length}")
        body_at = cur.pos
        body = cur.take(length - 2)

        if marker == Marker.DQT:
            _parse_dqt(body, body_at, qtables)
        elif marker == Marker.DHT:
            _parse_dht(body, body_at, dc_tables, ac_tables)
        elif marker == Marker.DRI:
            if len(body) >= 2 and struct.unpack(">H", body[:2])[0] != 0:
                raise UnsupportedFeatureError("restart intervals are not supported")
        elif marker == Marker.SOF0:
            frame = _parse_sof0(body, body_at)
        elif marker == Marker.SOS:
            if frame is None:
                raise JfifParseError(marker_at, "SOS before SOF0")
            selectors = _parse_sos(body, body_at)
            height, width, _ = frame
            try:
                dc = [dc_tables[selectors[c][0]] for c in range(3)]
                ac = [ac_tables[selectors[c][1]] for c in range(3)]
            except KeyError as e:
                raise JfifParseError(marker_at, f"scan references undefined Huffman table {e}")
            blocks, cur.pos = decode_entropy(
                data, cur.pos, -(-height // BLOCK), -(-width // BLOCK), dc, ac
            )
        elif Marker.APP0 <= marker <= 0xEF or marker == Marker.COM:
            continue
        else:
            raise UnsupportedFeatureError(f"marker FF{marker:02X} is not supported")

    if frame is None or blocks is None:
        raise JfifParseError(cur.pos, "stream ended before a complete scan")
    height, width, table_ids = frame
    try:
        luma, chroma = qtables[table_ids[0]], qtables[table_ids[1]]
    except KeyError as e:
        raise JfifParseError(cur.pos, f"frame references undefined quantization table {e}")
    if not np.array_equal(qtables[table_ids[1]], qtables[table_ids[2]]):
        raise UnsupportedFeatureError("separate Cb and Cr quantization tables are not supported")

    return DecodedJfif(
        blocks=blocks,
        tables=QuantTablePair(luma=luma.astype(np.float64), chroma=chroma.astype(np.float64)),
        width=width,
        height=height,
    )


def _parse_sof0(body: bytes, offset: int) -> Tuple[int, int, List[int]]:
    if len(body) < 6:
        raise JfifParseError(offset, "SOF0 segment truncated")
    precision, height, width, count = struct.unpack(">BHHB", body[:6])
    if precision != 8:
        raise UnsupportedFeatureError(f"{precision}-bit sample precision is not supported")
    if count != 3:
        raise UnsupportedFeatureError(f"{count}-component frames are not supported")
    if len(body) < 6 + 3 * count:
        raise JfifParseError(offset, "SOF0 component list truncated")
    if height == 0 or width == 0:
        raise UnsupportedFeatureError("DNL-defined heights are not supported")
    table_ids = []
    for c in range(count):
        comp_id, sampling, table_id = body[6 + 3 * c:9 + 3 * c]
        if comp_id != COMPONENT_IDS[c]:
            raise UnsupportedFeatureError(f"unexpected component id {comp_id}")
        if sampling != 0x11:
            raise UnsupportedFeatureError("chroma subsampling is not supported")
        table_ids.append(table_id)
    return height, width, table_ids


def _parse_sos(body: bytes, offset: int) -> List[Tuple[int, int]]:
    if len(body) < 1 or len(body) < 1 + 2 * body[0] + 3:
        raise JfifParseError(offset, "SOS segment truncated")
    count = body[0]
    if count != 3:
        raise UnsupportedFeatureError("non-interleaved scans are not supported")
    selectors = []
    for c in range(count):
        comp_id, tables = body[1 + 2 * c], body[2 + 2 * c]
        if comp_id != COMPONENT_IDS[c]:
            raise UnsupportedFeatureError(f"unexpected scan component id {comp_id}")
        selectors.append((tables >> 4, tables & 0x0F))
    ss, se, approx = body[1 + 2 * count:4 + 2 * count]
    if (ss, se, approx) != (0, 63, 0):
        raise UnsupportedFeatureError("spectral selection / successive approximation scans")
    return selectors


# =============================================================================
# Encode / decode paths
# =============================================================================

def compute_bpp(file: JfifFile, width: int, height: int) -> float:
    """Bits per pixel of a whole file over the unpadded pixel count."""
    if width <= 0 or height <= 0:
        raise ValueError("pixel count must be positive")
    return 8.0 * file.size_bytes / (width * height)


def quantize_coefficients(coeffs: np.ndarray, tables: QuantTablePair) -> QuantizedBlocks:
    """Quantize (3, N, M, 8, 8) coefficients with the luma/chroma tables."""
    z = np.stack([quantize_block(coeffs[c], tables.effective(c)) for c in range(3)])
    return QuantizedBlocks(coeffs=z)


def encode_image(
    image: ImagePlanes,
    tables: QuantTablePair,
    attention: Optional[np.ndarray] = None,
) -> EncodeResult:
    """
    Full encoder: FDCT, optional attention edit, integer quantization, Huffman, JFIF.

    Args:
        image: Padded RGB raster
        tables: Tables (real-valued tables are rounded to integers first)
        attention: Optional (3, N, M, 8, 8) weights multiplied into the coefficients

    Returns:
        The file, the quantized blocks it carries, and the integer tables used
    """
    coeffs = forward_dct(image).coeffs
    if attention is not None:
        coeffs = coeffs * attention
    int_tables = tables.rounded()
    z = quantize_coefficients(coeffs, int_tables)
    payload = encode_entropy(z)
    file = write_jfif(payload, int_tables, image.width, image.height)
    logger.debug(
        f"Encoded {image.width}x{image.height}: {file.size_bytes} bytes "
        f"({payload.bit_count} scan bits)"
    )
    return EncodeResult(file=file, blocks=z, tables=int_tables)


def encode_baseline(image: ImagePlanes, quality: int) -> EncodeResult:
    """Reference JPEG at an IJG quality factor (no subsampling, default Huffman)."""
    return encode_image(image, quality_to_tables(quality))


def reconstruct_ycbcr(z: QuantizedBlocks, tables: QuantTablePair) -> np.ndarray:
    """Decoder-side samples: dequantize, IDCT, round, clamp. Shape (8N, 8M, 3)."""
    samples = np.stack([
        idct_8x8(dequantize_block(z.coeffs[c], tables.effective(c))) for c in range(3)
    ])
    return np.clip(round_half_away(blocks_to_planes(samples)), 0.0, 255.0)


def reconstruct(z: QuantizedBlocks, tables: QuantTablePair, width: int, height: int) -> ImagePlanes:
    """Decoded RGB raster (rounded to 8-bit levels) as a standard decoder produces it."""
    rgb = round_half_away(ycbcr_to_rgb(reconstruct_ycbcr(z, tables)))
    padded_h, padded_w = rgb.shape[:2]
    return ImagePlanes(
        pixels=rgb,
        width=width,
        height=height,
        pad_right=padded_w - width,
        pad_bottom=padded_h - height,
    )


def decode_to_image(file: Union[JfifFile, bytes]) -> ImagePlanes:
    """Parse and reconstruct in one go."""
    decoded = decode_jfif(file)
    return reconstruct(decoded.blocks, decoded.tables, decoded.width, decoded.height)
