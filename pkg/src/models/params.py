"""Learnable parameters of the surrogate and the matching gradient/optimizer state."""

from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import expit

from src.models.errors import NonFiniteError
from src.models.image import BLOCK, QuantTablePair


class AttentionMaps(BaseModel):
    """Per-block, per-frequency attention kept as unconstrained logits.

    The maps themselves are sigmoid(logits), so every weight lies strictly
    inside (0, 1). One chroma map is shared by Cb and Cr.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits_luma: np.ndarray = Field(..., description="(N, M, 8, 8) luminance logits")
    logits_chroma: np.ndarray = Field(..., description="(N, M, 8, 8) chrominance logits")

    @field_validator("logits_luma", "logits_chroma")
    @classmethod
    def validate_logits(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 4 or v.shape[2:] != (BLOCK, BLOCK):
            raise ValueError(f"attention logits must have shape (N, M, 8, 8), got {v.shape}")
        return v

    @model_validator(mode="after")
    def validate_shapes(self) -> "AttentionMaps":
        if self.logits_luma.shape != self.logits_chroma.shape:
            raise ValueError("luma and chroma attention grids differ")
        return self

    @classmethod
    def neutral(cls, blocks_y: int, blocks_x: int) -> "AttentionMaps":
        """Zero logits, i.e. A = 0.5 everywhere."""
        shape = (blocks_y, blocks_x, BLOCK, BLOCK)
        return cls(logits_luma=np.zeros(shape), logits_chroma=np.zeros(shape))

    @property
    def grid(self) -> tuple[int, int]:
        return self.logits_luma.shape[0], self.logits_luma.shape[1]

    @property
    def luma(self) -> np.ndarray:
        return expit(self.logits_luma)

    @property
    def chroma(self) -> np.ndarray:
        return expit(self.logits_chroma)


class SurrogateParams(BaseModel):
    """θ: quantization tables plus optional attention (None means A ≡ 1)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tables: QuantTablePair
    attention: Optional[AttentionMaps] = None

    def attention_stack(self, blocks_y: int, blocks_x: int) -> np.ndarray:
        """(3, N, M, 8, 8) weights for Y, Cb, Cr; chroma map repeated for Cb and Cr."""
        if self.attention is None:
            return np.ones((3, blocks_y, blocks_x, BLOCK, BLOCK))
        if self.attention.grid != (blocks_y, blocks_x):
            raise ValueError(
                f"attention grid {self.attention.grid} does not match image grid "
                f"{(blocks_y, blocks_x)}"
            )
        chroma = self.attention.chroma
        return np.stack([self.attention.luma, chroma, chroma])

    def table_stack(self) -> np.ndarray:
        """(3, 8, 8) effective tables for Y, Cb, Cr."""
        chroma = self.tables.effective_chroma
        return np.stack([self.tables.effective_luma, chroma, chroma])


class GradientSet(BaseModel):
    """∂L/∂θ with respect to scaled table parameters and attention logits."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    d_q_luma: np.ndarray
    d_q_chroma: np.ndarray
    d_logits_luma: Optional[np.ndarray] = None
    d_logits_chroma: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, params: SurrogateParams) -> "GradientSet":
        att = params.attention
        return cls(
            d_q_luma=np.zeros((BLOCK, BLOCK)),
            d_q_chroma=np.zeros((BLOCK, BLOCK)),
            d_logits_luma=None if att is None else np.zeros_like(att.logits_luma),
            d_logits_chroma=None if att is None else np.zeros_like(att.logits_chroma),
        )

    def groups(self) -> Dict[str, np.ndarray]:
        out = {"q_luma": self.d_q_luma, "q_chroma": self.d_q_chroma}
        if self.d_logits_luma is not None:
            out["logits_luma"] = self.d_logits_luma
        if self.d_logits_chroma is not None:
            out["logits_chroma"] = self.d_logits_chroma
        return out

    def __add__(self, other: "GradientSet") -> "GradientSet":
        def add(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
            if a is None:
                return b
            if b is None:
                return a
            if a.shape != b.shape:
                raise ValueError(f"gradient shape mismatch: {a.shape} vs {b.shape}")
            return a + b

        return GradientSet(
            d_q_luma=self.d_q_luma + other.d_q_luma,
            d_q_chroma=self.d_q_chroma + other.d_q_chroma,
            d_logits_luma=add(self.d_logits_luma, other.d_logits_luma),
            d_logits_chroma=add(self.d_logits_chroma, other.d_logits_chroma),
        )

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            d_q_luma=self.d_q_luma * factor,
            d_q_chroma=self.d_q_chroma * factor,
            d_logits_luma=None if self.d_logits_luma is None else self.d_logits_luma * factor,
            d_logits_chroma=None if self.d_logits_chroma is None else self.d_logits_chroma * factor,
        )

    def tables_only(self) -> "GradientSet":
        return GradientSet(d_q_luma=self.d_q_luma, d_q_chroma=self.d_q_chroma)

    def check_finite(self) -> None:
        for name, grad in self.groups().items():
            bad = np.argwhere(~np.isfinite(grad))
            if bad.size:
                raise NonFiniteError(f"gradient {name}", tuple(int(i) for i in bad[0]))


class AdamState(BaseModel):
    """Moment estimates and hyperparameters of one Adam optimizer."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    first_moment: Dict[str, np.ndarray] = Field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = Field(default_factory=dict)
    step_count: int = Field(default=0, ge=0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    learning_rate: float = Field(default=1e-6, gt=0.0)
