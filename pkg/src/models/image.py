"""Raster, coefficient and container models shared by the codec and the surrogate."""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BLOCK = 8
CHANNELS = ("Y", "Cb", "Cr")

# Baseline Huffman categories: DC differences up to 11 bits, AC values up to 10.
MAX_QUANTIZED = 2047


class ImagePlanes(BaseModel):
    """RGB raster padded on the right/bottom to whole 8×8 blocks."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    pixels: np.ndarray = Field(..., description="Padded (8N, 8M, 3) float64 samples in [0, 255]")
    width: int = Field(..., gt=0, description="Unpadded width in pixels")
    height: int = Field(..., gt=0, description="Unpadded height in pixels")
    pad_right: int = Field(default=0, ge=0, le=7, description="Replicated columns on the right")
    pad_bottom: int = Field(default=0, ge=0, le=7, description="Replicated rows at the bottom")

    @field_validator("pixels")
    @classmethod
    def validate_pixels(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {v.shape}")
        if v.shape[0] % BLOCK or v.shape[1] % BLOCK or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError(f"padded size {v.shape[:2]} is not a positive multiple of 8")
        if v.size and (v.min() < 0.0 or v.max() > 255.0):
            raise ValueError("sample values must lie in [0, 255]")
        return v.astype(np.float64, copy=False)

    @model_validator(mode="after")
    def validate_padding(self) -> "ImagePlanes":
        if self.height + self.pad_bottom != self.pixels.shape[0]:
            raise ValueError("height + pad_bottom does not match the padded raster")
        if self.width + self.pad_right != self.pixels.shape[1]:
            raise ValueError("width + pad_right does not match the padded raster")
        return self

    @classmethod
    def from_array(cls, rgb: np.ndarray) -> "ImagePlanes":
        """Wrap an (H, W, 3) array, replicate-padding it to multiples of 8."""
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) RGB array, got {rgb.shape}")
        height, width = rgb.shape[:2]
        pad_bottom = (-height) % BLOCK
        pad_right = (-width) % BLOCK
        padded = np.pad(rgb, ((0, pad_bottom), (0, pad_right), (0, 0)), mode="edge")
        return cls(
            pixels=padded,
            width=width,
            height=height,
            pad_right=pad_right,
            pad_bottom=pad_bottom,
        )

    @property
    def blocks_y(self) -> int:
        return self.pixels.shape[0] // BLOCK

    @property
    def blocks_x(self) -> int:
        return self.pixels.shape[1] // BLOCK

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def cropped(self) -> np.ndarray:
        """Samples without the padding."""
        return self.pixels[: self.height, : self.width]

    def with_pixels(self, pixels: np.ndarray) -> "ImagePlanes":
        """Same geometry, new samples."""
        return ImagePlanes(
            pixels=pixels,
            width=self.width,
            height=self.height,
            pad_right=self.pad_right,
            pad_bottom=self.pad_bottom,
        )


class DctTensor(BaseModel):
    """Real-valued coefficients, shape (3, N, M, 8, 8) in Y, Cb, Cr order."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coeffs: np.ndarray

    @field_validator("coeffs")
    @classmethod
    def validate_shape(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 5 or v.shape[0] != 3 or v.shape[3:] != (BLOCK, BLOCK):
            raise ValueError(f"coefficients must have shape (3, N, M, 8, 8), got {v.shape}")
        return v

    @property
    def blocks_y(self) -> int:
        return self.coeffs.shape[1]

    @property
    def blocks_x(self) -> int:
        return self.coeffs.shape[2]


class QuantizedBlocks(BaseModel):
    """Integer coefficients in natural (row-major) order, shape (3, N, M, 8, 8)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coeffs: np.ndarray

    @field_validator("coeffs")
    @classmethod
    def validate_coeffs(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 5 or v.shape[0] != 3 or v.shape[3:] != (BLOCK, BLOCK):
            raise ValueError(f"coefficients must have shape (3, N, M, 8, 8), got {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            if not np.all(np.isfinite(v)) or not np.array_equal(v, np.round(v)):
                raise ValueError("quantized coefficients must be integers")
            v = v.astype(np.int64)
        if v.size and np.abs(v).max() > MAX_QUANTIZED:
            raise ValueError(f"quantized magnitude exceeds {MAX_QUANTIZED}")
        return v.astype(np.int64, copy=False)

    @property
    def blocks_y(self) -> int:
        return self.coeffs.shape[1]

    @property
    def blocks_x(self) -> int:
        return self.coeffs.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedBlocks):
            return NotImplemented
        return np.array_equal(self.coeffs, other.coeffs)


class QuantTablePair(BaseModel):
    """Luma and chroma tables stored as scaled parameters (effective = param / scale_s)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    luma: np.ndarray = Field(..., description="8×8 scaled luminance parameters")
    chroma: np.ndarray = Field(..., description="8×8 scaled chrominance parameters")
    scale_s: float = Field(default=1.0, gt=0, description="Parameter scaling factor s")

    @field_validator("luma", "chroma")
    @classmethod
    def validate_table(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (BLOCK, BLOCK):
            raise ValueError(f"quantization table must be 8×8, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("quantization table contains non-finite entries")
        return v

    @model_validator(mode="after")
    def validate_range(self) -> "QuantTablePair":
        for name, table in (("luma", self.effective_luma), ("chroma", self.effective_chroma)):
            # relative slack for the divide by s
            if table.min() < 1.0 - 1e-9 or table.max() > 255.0 + 1e-9:
                raise ValueError(f"effective {name} table leaves [1, 255]")
        return self

    @classmethod
    def from_effective(
        cls, luma: np.ndarray, chroma: np.ndarray, scale_s: float = 1.0
    ) -> "QuantTablePair":
        """Build from tables expressed in quantizer units."""
        return cls(
            luma=np.asarray(luma, dtype=np.float64) * scale_s,
            chroma=np.asarray(chroma, dtype=np.float64) * scale_s,
            scale_s=scale_s,
        )

    @property
    def effective_luma(self) -> np.ndarray:
        return self.luma / self.scale_s

    @property
    def effective_chroma(self) -> np.ndarray:
        return self.chroma / self.scale_s

    def effective(self, channel: int) -> np.ndarray:
        """Table applied to channel 0 (Y), 1 (Cb) or 2 (Cr)."""
        return self.effective_luma if channel == 0 else self.effective_chroma

    def rounded(self) -> "QuantTablePair":
        """Nearest-integer tables in [1, 255], as stored in a DQT segment."""
        return QuantTablePair(
            luma=np.clip(np.floor(self.effective_luma + 0.5), 1, 255),
            chroma=np.clip(np.floor(self.effective_chroma + 0.5), 1, 255),
            scale_s=1.0,
        )

    def is_integral(self) -> bool:
        return self.scale_s == 1.0 and all(
            np.array_equal(t, np.round(t)) for t in (self.luma, self.chroma)
        )


class JfifFile(BaseModel):
    """A complete baseline JFIF byte stream and the tables it records."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: bytes
    luma_table: np.ndarray = Field(..., description="8×8 integer table with id 0")
    chroma_table: np.ndarray = Field(..., description="8×8 integer table with id 1")
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)

    @field_validator("data")
    @classmethod
    def validate_markers(cls, v: bytes) -> bytes:
        if v[:2] != b"\xff\xd8" or v[-2:] != b"\xff\xd9":
            raise ValueError("JFIF data must start with SOI and end with EOI")
        return v

    @property
    def size_bytes(self) -> int:
        return len(self.data)
