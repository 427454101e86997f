"""Loss weights, training configuration and experiment records."""

import math
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.models.params import SurrogateParams

LAMBDA_RANGE = (1e-4, 1e-1)

# config-file key -> (TrainConfig field, parser)
CONFIG_FILE_KEYS = {
    "lambdas": ("lambda_values", lambda s: [float(x) for x in s.split(",") if x.strip()]),
    "steps": ("steps", int),
    "batch": ("batch_size", int),
    "crop": ("crop_size", int),
    "seed": ("seed", int),
    "s": ("scale_s", float),
    "attention_s": ("attention_scale", float),
    "lr": ("learning_rate", float),
    "mode": ("mode", str),
    "log_every": ("log_every", int),
}
WEIGHT_KEYS = ("alpha", "beta", "gamma")


class LossWeights(BaseModel):
    """λ (rate-distortion tradeoff), α (tables), β (attention), γ (perceptual, reserved)."""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(..., gt=0, alias="lambda", description="Distortion weight")
    alpha: float = Field(default=10.0, ge=0, description="Reciprocal-table rate weight")
    beta: float = Field(default=1.0, ge=0, description="Attention-mean rate weight")
    gamma: float = Field(default=0.0, ge=0, description="Perceptual distortion weight")

    def with_lambda(self, value: float) -> "LossWeights":
        return self.model_copy(update={"lambda_": value})


class LossReport(BaseModel):
    """Decomposed objective: total = λ·mse + rate_q + rate_attention (+ γ·perceptual)."""

    total: float
    distortion_mse: float
    rate_q: float
    rate_attention: float
    rate_total: float
    perceptual: float = 0.0

    @model_validator(mode="after")
    def validate_finite(self) -> "LossReport":
        for name in ("total", "distortion_mse", "rate_q", "rate_attention", "rate_total"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        return self


class TrainMode(str, Enum):
    """Optimization regimes exposed on the command line."""

    PER_IMAGE_QA = "per-image-qa"
    PER_IMAGE_Q = "per-image-q"
    CORPUS_Q = "corpus-q"

    @property
    def learns_attention(self) -> bool:
        return self is TrainMode.PER_IMAGE_QA

    @property
    def record_mode(self) -> "RecordMode":
        if self is TrainMode.CORPUS_Q:
            return RecordMode.CORPUS_QTABLES
        return RecordMode.QTABLES_ATTENTION if self.learns_attention else RecordMode.QTABLES


class TrainConfig(BaseModel):
    """Hyperparameters of one optimization sweep."""

    lambda_values: List[float] = Field(default_factory=lambda: [1e-2])
    steps: int = Field(default=20000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    crop_size: int = Field(default=256, ge=8)
    seed: int = Field(default=0, ge=0)
    scale_s: float = Field(default=1e-5, gt=0)
    attention_scale: float = Field(default=1e-5, gt=0)
    learning_rate: float = Field(default=1e-6, gt=0)
    weights: LossWeights = Field(default_factory=lambda: LossWeights(**{"lambda": 1e-2}))
    mode: TrainMode = TrainMode.PER_IMAGE_QA
    log_every: int = Field(default=100, ge=1)
    check_invariants: bool = Field(default=True, description="Assert loss/projection invariants every step")

    @field_validator("lambda_values")
    @classmethod
    def validate_lambdas(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one λ value is required")
        lo, hi = LAMBDA_RANGE
        for lam in v:
            if not lo <= lam <= hi:
                raise ValueError(f"λ={lam} outside the sweep interval [{lo}, {hi}]")
        return v

    @field_validator("crop_size")
    @classmethod
    def validate_crop(cls, v: int) -> int:
        if v % 8:
            raise ValueError("crop_size must be a multiple of 8")
        return v

    @classmethod
    def from_sources(
        cls,
        config_file: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "TrainConfig":
        """Merge a flat key=value file with flag overrides (flags win)."""
        raw: Dict[str, Any] = {}
        if config_file is not None:
            if not Path(config_file).is_file():
                raise FileNotFoundError(f"config file not found: {config_file}")
            raw.update({k.strip().lower(): v for k, v in dotenv_values(config_file).items() if v})
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value

        fields: Dict[str, Any] = {}
        weights: Dict[str, Any] = {}
        for key, value in raw.items():
            if key in CONFIG_FILE_KEYS:
                name, parse = CONFIG_FILE_KEYS[key]
                fields[name] = parse(value) if isinstance(value, str) else value
            elif key in WEIGHT_KEYS:
                weights[key] = float(value)
            else:
                raise ValueError(f"unknown config key: {key}")

        lambdas = fields.get("lambda_values") or [1e-2]
        fields["weights"] = LossWeights(**{"lambda": lambdas[0]}, **weights)
        return cls(**fields)

    def weights_for(self, lam: float) -> LossWeights:
        return self.weights.with_lambda(lam)


class OptimizedParams(BaseModel):
    """Trained θ with provenance."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: SurrogateParams
    lambda_: float = Field(..., gt=0)
    steps: int
    seed: int
    mode: TrainMode
    report: LossReport
    trace: List[LossReport] = Field(default_factory=list)


class RecordMode(str, Enum):
    BASELINE = "baseline"
    QTABLES = "qtables"
    QTABLES_ATTENTION = "qtables_attention"
    CORPUS_QTABLES = "corpus_qtables"
    EVALUATED = "evaluated"


class ExperimentRecord(BaseModel):
    """One (image, setting) evaluation point of a rate-distortion curve."""

    image_id: str
    mode: RecordMode
    setting: float = Field(..., description="Quality factor (baseline) or λ")
    bpp: float
    psnr_db: float
    ms_ssim: Optional[float] = None
    rate_q: Optional[float] = None
    rate_attention: Optional[float] = None
    file_bytes: int = Field(..., ge=0)
    seed: Optional[int] = None
    pixel_count: int = Field(default=0, ge=0, description="Unpadded pixels; 0 on averaged rows")
    error: Optional[str] = None

    MEAN_ID: ClassVar[str] = "__mean__"

    @model_validator(mode="after")
    def validate_bpp(self) -> "ExperimentRecord":
        if self.pixel_count and self.error is None:
            expected = 8.0 * self.file_bytes / self.pixel_count
            if not math.isclose(self.bpp, expected, rel_tol=1e-12):
                raise ValueError(f"bpp {self.bpp} disagrees with file size ({expected})")
        return self

    @classmethod
    def csv_header(cls) -> List[str]:
        return list(cls.model_fields.keys())

    def to_csv_row(self) -> Dict[str, str]:
        """Stable string rendering for byte-deterministic CSV output."""

        def num(v: Optional[float], digits: int = 6) -> str:
            if v is None:
                return ""
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return f"{v:.{digits}f}"

        return {
            "image_id": self.image_id,
            "mode": self.mode.value,
            "setting": f"{self.setting:g}",
            "bpp": num(self.bpp),
            "psnr_db": num(self.psnr_db, 4),
            "ms_ssim": num(self.ms_ssim),
            "rate_q": num(self.rate_q),
            "rate_attention": num(self.rate_attention),
            "file_bytes": str(self.file_bytes),
            "seed": "" if self.seed is None else str(self.seed),
            "pixel_count": str(self.pixel_count),
            "error": self.error or "",
        }

    @classmethod
    def from_csv_row(cls, row: Dict[str, str]) -> "ExperimentRecord":
        """Parse a row written by to_csv_row; bpp is recomputed from the byte count."""

        def num(v: str) -> Optional[float]:
            return None if v == "" else float(v)

        file_bytes = int(row["file_bytes"])
        pixel_count = int(row.get("pixel_count") or 0)
        error = row.get("error") or None
        bpp = float(row["bpp"])
        if pixel_count and error is None:
            bpp = 8.0 * file_bytes / pixel_count
        return cls(
            image_id=row["image_id"],
            mode=RecordMode(row["mode"]),
            setting=float(row["setting"]),
            bpp=bpp,
            psnr_db=float(row["psnr_db"]),
            ms_ssim=num(row.get("ms_ssim", "")),
            rate_q=num(row.get("rate_q", "")),
            rate_attention=num(row.get("rate_attention", "")),
            file_bytes=file_bytes,
            pixel_count=pixel_count,
            seed=None if not row.get("seed") else int(row["seed"]),
            error=error,
        )
