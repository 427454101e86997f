"""Tests for Huffman entropy coding of quantized blocks."""

import numpy as np
import pytest

from src.models.errors import EntropyCodingError, JfifParseError
from src.models.image import QuantizedBlocks
from src.services.entropy_coder import (
    AC_TABLES,
    DC_TABLES,
    BitReader,
    BitWriter,
    HuffmanTable,
    decode_entropy,
    encode_entropy,
    encode_magnitude,
    extend,
    magnitude_category,
)


def zero_blocks(n: int, m: int) -> QuantizedBlocks:
    return QuantizedBlocks(coeffs=np.zeros((3, n, m, 8, 8), dtype=np.int64))


def sparse_blocks(rng: np.random.Generator, n: int, m: int, scale: float = 6.0) -> QuantizedBlocks:
    """Laplacian-ish coefficients, mostly zero at high frequencies."""
    decay = np.exp(-np.add.outer(np.arange(8), np.arange(8)) / 3.0)
    values = np.round(rng.laplace(0, scale, size=(3, n, m, 8, 8)) * decay)
    return QuantizedBlocks(coeffs=np.clip(values, -500, 500).astype(np.int64))


def roundtrip(z: QuantizedBlocks) -> QuantizedBlocks:
    payload = encode_entropy(z)
    decoded, _ = decode_entropy(
        payload.data, 0, z.blocks_y, z.blocks_x,
        [DC_TABLES[0], DC_TABLES[1], DC_TABLES[1]],
        [AC_TABLES[0], AC_TABLES[1], AC_TABLES[1]],
    )
    return decoded


class TestHuffmanTable:

    def test_dc_luma_codes(self):
        table = DC_TABLES[0]
        assert table.encode(0).length == 2 and table.encode(0).code == 0b00
        assert table.encode(11).length == 9

    def test_ac_luma_eob(self):
        code = AC_TABLES[0].encode(0x00)
        assert (code.code, code.length) == (0b1010, 4)

    def test_ac_chroma_eob(self):
        code = AC_TABLES[1].encode(0x00)
        assert (code.code, code.length) == (0b00, 2)

    def test_inconsistent_spec_rejected(self):
        with pytest.raises(ValueError):
            HuffmanTable([1] + [0] * 15, [0, 1])

    def test_unknown_symbol(self):
        with pytest.raises(KeyError):
            DC_TABLES[0].encode(12)


class TestMagnitudeCoding:

    @pytest.mark.parametrize(
        "value,category", [(0, 0), (1, 1), (-1, 1), (2, 2), (-3, 2), (255, 8), (-1023, 10), (2047, 11)]
    )
    def test_category(self, value, category):
        assert magnitude_category(value) == category

    def test_extend_inverts_encode(self):
        for value in range(-300, 301):
            size = magnitude_category(value)
            assert extend(encode_magnitude(value, size), size) == value


class TestBitWriter:

    def test_stuffing_after_ff(self):
        writer = BitWriter()
        writer.write_bits(0xFF, 8)
        writer.write_bits(0x12, 8)
        assert writer.get_data() == b"\xff\x00\x12"
        assert writer.total_bits == 16

    def test_flush_pads_with_ones(self):
        writer = BitWriter()
        writer.write_bits(0b101, 3)
        writer.flush()
        assert writer.get_data() == bytes([0b10111111])
        assert writer.total_bits == 3

    def test_reader_skips_stuffed_zero(self):
        reader = BitReader(b"\xff\x00\x80", 0)
        assert reader.read_bits(8) == 0xFF
        assert reader.read_bit() == 1
        assert reader.pos == 3

    def test_reader_truncated(self):
        reader = BitReader(b"\x01", 0)
        reader.read_bits(8)
        with pytest.raises(JfifParseError):
            reader.read_bit()


class TestEncodeEntropy:

    def test_single_zero_block_bit_count(self):
        # luma "00"+"1010", each chroma "00"+"00"
        assert encode_entropy(zero_blocks(1, 1)).bit_count == 14

    def test_zero_image_bit_count(self):
        assert encode_entropy(zero_blocks(2, 3)).bit_count == 6 * 14

    def test_payload_is_byte_aligned(self):
        payload = encode_entropy(zero_blocks(1, 1))
        assert len(payload.data) == 2
        assert payload.data[-1] & 0x03 == 0x03

    def test_dc_difference_overflow(self):
        coeffs = np.zeros((3, 1, 2, 8, 8), dtype=np.int64)
        coeffs[0, 0, 0, 0, 0] = -2047
        coeffs[0, 0, 1, 0, 0] = 2047
        with pytest.raises(EntropyCodingError) as exc:
            encode_entropy(QuantizedBlocks(coeffs=coeffs))
        assert exc.value.channel == "Y"
        assert exc.value.block == (0, 1)

    def test_ac_overflow(self):
        coeffs = np.zeros((3, 1, 1, 8, 8), dtype=np.int64)
        coeffs[2, 0, 0, 3, 4] = 1500
        with pytest.raises(EntropyCodingError) as exc:
            encode_entropy(QuantizedBlocks(coeffs=coeffs))
        assert exc.value.channel == "Cr"

    def test_largest_legal_values(self):
        coeffs = np.zeros((3, 1, 1, 8, 8), dtype=np.int64)
        coeffs[0, 0, 0, 0, 0] = 2047
        coeffs[0, 0, 0, 7, 7] = -1023
        z = QuantizedBlocks(coeffs=coeffs)
        assert roundtrip(z) == z

    def test_more_bits_for_more_detail(self, rng):
        quiet = sparse_blocks(rng, 2, 2, scale=1.0)
        busy = sparse_blocks(rng, 2, 2, scale=30.0)
        assert encode_entropy(busy).bit_count > encode_entropy(quiet).bit_count


class TestDecodeEntropy:

    def test_round_trip_random(self, rng):
        for _ in range(10):
            z = sparse_blocks(rng, 3, 4)
            assert roundtrip(z) == z

    def test_long_zero_runs(self):
        coeffs = np.zeros((3, 1, 1, 8, 8), dtype=np.int64)
        coeffs[0, 0, 0, 7, 7] = 5  # 62 zeros first: three ZRL codes
        coeffs[1, 0, 0, 4, 4] = -2
        z = QuantizedBlocks(coeffs=coeffs)
        assert roundtrip(z) == z

    def test_consumed_offset(self, rng):
        z = sparse_blocks(rng, 2, 2)
        payload = encode_entropy(z)
        _, end = decode_entropy(
            payload.data + b"\xff\xd9", 0, 2, 2,
            [DC_TABLES[0], DC_TABLES[1], DC_TABLES[1]],
            [AC_TABLES[0], AC_TABLES[1], AC_TABLES[1]],
        )
        assert end == len(payload.data)
