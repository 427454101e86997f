"""Configuration models and settings management."""

import os
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables."""

    # Parallelism
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, alias="QTUNE_THREADS")

    # Output
    output_dir: str = Field(default="results", alias="QTUNE_OUTPUT_DIR")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_file: str = Field(default="logs/qtune.log", alias="LOG_FILE")

    model_config = SettingsConfigDict(
        env_file="config/.env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra='ignore'
    )

    @field_validator('threads')
    @classmethod
    def validate_threads(cls, v: int) -> int:
        """Clamp the worker cap to at least one thread."""
        return max(1, v)

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR"}:
            raise ValueError(f"Unknown LOG_LEVEL: {v}")
        return level


# Global settings instance
settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create settings singleton."""
    global settings
    if settings is None:
        settings = Settings()
    return settings


def reset_settings() -> None:
    """Drop the cached settings so the environment is read again."""
    global settings
    settings = None
