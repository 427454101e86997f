"""Baseline sequential Huffman entropy coding with the standard default tables."""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.models.errors import EntropyCodingError, JfifParseError
from src.models.image import CHANNELS, QuantizedBlocks
from src.services.transforms import ZIGZAG_ORDER

# =============================================================================
# Standard Huffman Tables (ITU-T T.81 Annex K)
# =============================================================================

DC_LUMINANCE_BITS = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
DC_LUMINANCE_VALUES = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]

DC_CHROMINANCE_BITS = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
DC_CHROMINANCE_VALUES = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]

AC_LUMINANCE_BITS = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 125]
AC_LUMINANCE_VALUES = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12,
    0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08,
    0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16,
    0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39,
    0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
    0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79,
    0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98,
    0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6,
    0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4,
    0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea,
    0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
]

AC_CHROMINANCE_BITS = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 119]
AC_CHROMINANCE_VALUES = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21,
    0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91,
    0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0,
    0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34,
    0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38,
    0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58,
    0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78,
    0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96,
    0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5,
    0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4,
    0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
    0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2,
    0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda,
    0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9,
    0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
]

MAX_DC_CATEGORY = 11
MAX_AC_CATEGORY = 10
EOB = 0x00
ZRL = 0xF0


@dataclass(frozen=True)
class HuffmanCode:
    """Represents a single Huffman code"""
    code: int
    length: int


class HuffmanTable:
    """Canonical Huffman table built from a DHT (bits, values) description."""

    def __init__(self, bits: Sequence[int], values: Sequence[int]):
        """
        Args:
            bits: Number of codes of each length (1-16 bits)
            values: Symbol values in order of increasing code length
        """
        if len(bits) != 16:
            raise ValueError("Huffman bits list must have 16 entries")
        if sum(bits) != len(values):
            raise ValueError("Huffman bits/values disagree")
        self.bits = list(bits)
        self.values = list(values)
        self.codes: Dict[int, HuffmanCode] = {}
        self.lookup: Dict[Tuple[int, int], int] = {}

        code = 0
        value_idx = 0
        for bit_length in range(1, 17):
            for _ in range(self.bits[bit_length - 1]):
                symbol = self.values[value_idx]
                self.codes[symbol] = HuffmanCode(code, bit_length)
                self.lookup[(bit_length, code)] = symbol
                value_idx += 1
                code += 1
            code <<= 1

    def encode(self, symbol: int) -> HuffmanCode:
        if symbol not in self.codes:
            raise KeyError(f"Symbol {symbol:#04x} not in Huffman table")
        return self.codes[symbol]


DC_TABLES = (
    HuffmanTable(DC_LUMINANCE_BITS, DC_LUMINANCE_VALUES),
    HuffmanTable(DC_CHROMINANCE_BITS, DC_CHROMINANCE_VALUES),
)
AC_TABLES = (
    HuffmanTable(AC_LUMINANCE_BITS, AC_LUMINANCE_VALUES),
    HuffmanTable(AC_CHROMINANCE_BITS, AC_CHROMINANCE_VALUES),
)

# (class, id, bits, values) for the four DHT segments, in emission order
DEFAULT_DHT_SPECS = (
    (0, 0, DC_LUMINANCE_BITS, DC_LUMINANCE_VALUES),
    (0, 1, DC_CHROMINANCE_BITS, DC_CHROMINANCE_VALUES),
    (1, 0, AC_LUMINANCE_BITS, AC_LUMINANCE_VALUES),
    (1, 1, AC_CHROMINANCE_BITS, AC_CHROMINANCE_VALUES),
)


class EntropyPayload(BaseModel):
    """Byte-aligned, byte-stuffed scan data."""

    data: bytes
    bit_count: int = Field(..., ge=0, description="Coded bits before 1-padding and stuffing")


class BitWriter:
    """Writes bits MSB-first with 0xFF byte stuffing."""

    def __init__(self):
        self.buffer = bytearray()
        self.bit_buffer = 0
        self.bit_count = 0
        self.total_bits = 0

    def write_bits(self, value: int, num_bits: int):
        if num_bits == 0:
            return
        self.bit_buffer = (self.bit_buffer << num_bits) | (value & ((1 << num_bits) - 1))
        self.bit_count += num_bits
        self.total_bits += num_bits

        while self.bit_count >= 8:
            self.bit_count -= 8
            byte = (self.bit_buffer >> self.bit_count) & 0xFF
            self.buffer.append(byte)
            self.bit_buffer &= (1 << self.bit_count) - 1
            if byte == 0xFF:
                self.buffer.append(0x00)

    def flush(self):
        """Pad with 1s to the byte boundary."""
        if self.bit_count > 0:
            padding = 8 - self.bit_count
            coded = self.total_bits
            self.write_bits((1 << padding) - 1, padding)
            self.total_bits = coded

    def get_data(self) -> bytes:
        return bytes(self.buffer)


class BitReader:
    """Reads bits MSB-first from scan data, removing stuffed zero bytes."""

    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start
        self.current = 0
        self.bits_left = 0

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise JfifParseError(self.pos, "scan data truncated")
        byte = self.data[self.pos]
        if byte == 0xFF:
            if self.pos + 1 >= len(self.data):
                raise JfifParseError(self.pos, "scan data truncated after 0xFF")
            follower = self.data[self.pos + 1]
            if follower != 0x00:
                raise JfifParseError(self.pos, f"marker FF{follower:02X} inside scan data")
            self.pos += 2
        else:
            self.pos += 1
        return byte

    def read_bit(self) -> int:
        if self.bits_left == 0:
            self.current = self._next_byte()
            self.bits_left = 8
        self.bits_left -= 1
        return (self.current >> self.bits_left) & 1

    def read_bits(self, count: int) -> int:
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value

    def decode(self, table: HuffmanTable) -> int:
        code = 0
        for length in range(1, 17):
            code = (code << 1) | self.read_bit()
            symbol = table.lookup.get((length, code))
            if symbol is not None:
                return symbol
        raise JfifParseError(self.pos, "invalid Huffman code")


def magnitude_category(value: int) -> int:
    """Number of bits needed for |value| (JPEG SSSS)."""
    return abs(int(value)).bit_length()


def encode_magnitude(value: int, size: int) -> int:
    """Positive values as-is, negative values in one's complement."""
    return value if value >= 0 else value + (1 << size) - 1


def extend(bits: int, size: int) -> int:
    """Inverse of encode_magnitude."""
    if size == 0:
        return 0
    return bits if bits >= (1 << (size - 1)) else bits - (1 << size) + 1


def _encode_block(
    writer: BitWriter,
    zigzag: np.ndarray,
    dc_pred: int,
    dc_table: HuffmanTable,
    ac_table: HuffmanTable,
    channel: str,
    block: Tuple[int, int],
) -> int:
    """Encode one block given in zig-zag order; returns its DC value."""
    dc_value = int(zigzag[0])
    diff = dc_value - dc_pred
    size = magnitude_category(diff)
    if size > MAX_DC_CATEGORY:
        raise EntropyCodingError(channel, block, f"DC difference {diff} exceeds category 11")
    code = dc_table.encode(size)
    writer.write_bits(code.code, code.length)
    if size:
        writer.write_bits(encode_magnitude(diff, size), size)

    last = 0
    for k in np.flatnonzero(zigzag[1:]) + 1:
        value = int(zigzag[k])
        run = int(k) - last - 1
        while run > 15:
            code = ac_table.encode(ZRL)
            writer.write_bits(code.code, code.length)
            run -= 16
        size = magnitude_category(value)
        if size > MAX_AC_CATEGORY:
            raise EntropyCodingError(
                channel, block, f"AC coefficient {value} at zig-zag index {k} exceeds category 10"
            )
        code = ac_table.encode((run << 4) | size)
        writer.write_bits(code.code, code.length)
        writer.write_bits(encode_magnitude(value, size), size)
        last = int(k)

    if last != 63:
        code = ac_table.encode(EOB)
        writer.write_bits(code.code, code.length)
    return dc_value


def encode_entropy(z: QuantizedBlocks) -> EntropyPayload:
    """
    Huffman-code all blocks in interleaved order (Y, Cb, Cr per block position).

    Args:
        z: Quantized coefficients in natural order

    Returns:
        Stuffed, 1-padded scan data and the number of coded bits
    """
    writer = BitWriter()
    n, m = z.blocks_y, z.blocks_x
    zigzag = z.coeffs.reshape(3, n, m, 64)[..., ZIGZAG_ORDER]
    dc_pred = [0, 0, 0]

    for by in range(n):
        for bx in range(m):
            for c in range(3):
                table = 0 if c == 0 else 1
                dc_pred[c] = _encode_block(
                    writer, zigzag[c, by, bx], dc_pred[c],
                    DC_TABLES[table], AC_TABLES[table], CHANNELS[c], (by, bx),
                )

    coded = writer.total_bits
    writer.flush()
    return EntropyPayload(data=writer.get_data(), bit_count=coded)


def decode_entropy(
    data: bytes,
    start: int,
    blocks_y: int,
    blocks_x: int,
    dc_tables: Sequence[HuffmanTable],
    ac_tables: Sequence[HuffmanTable],
) -> Tuple[QuantizedBlocks, int]:
    """
    Decode interleaved baseline scan data.

    Args:
        data: Whole file bytes
        start: Offset of the first scan byte
        dc_tables, ac_tables: Per-component tables (Y, Cb, Cr)

    Returns:
        Coefficients in natural order and the offset just past the scan data
    """
    reader = BitReader(data, start)
    out = np.zeros((3, blocks_y, blocks_x, 64), dtype=np.int64)
    dc_pred = [0, 0, 0]

    for by in range(blocks_y):
        for bx in range(blocks_x):
            for c in range(3):
                zigzag: List[int] = [0] * 64
                size = reader.decode(dc_tables[c])
                if size > MAX_DC_CATEGORY:
                    raise JfifParseError(reader.pos, f"DC category {size} out of range")
                dc_pred[c] += extend(reader.read_bits(size), size)
                zigzag[0] = dc_pred[c]

                k = 1
                while k < 64:
                    symbol = reader.decode(ac_tables[c])
                    run, size = symbol >> 4, symbol & 0x0F
                    if size == 0:
                        if run == 15:
                            k += 16
                            continue
                        break
                    k += run
                    if k > 63:
                        raise JfifParseError(reader.pos, "AC run past end of block")
                    zigzag[k] = extend(reader.read_bits(size), size)
                    k += 1
                if k > 64:
                    raise JfifParseError(reader.pos, "zero run past end of block")
                out[c, by, bx, ZIGZAG_ORDER] = zigzag

    return QuantizedBlocks(coeffs=out.reshape(3, blocks_y, blocks_x, 8, 8)), reader.pos
