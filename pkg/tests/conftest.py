"""Shared fixtures: seeded generators and synthetic natural-looking images."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.models.config import reset_settings
from src.models.image import ImagePlanes


def make_natural(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth gradients, a few edges and mild noise, rounded to 8-bit levels."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = np.stack([
        110 + 70 * np.sin(xx / 17.0 + 0.5) * np.cos(yy / 23.0),
        120 + 60 * np.cos((xx + yy) / 29.0),
        100 + 50 * np.sin(yy / 11.0 - 1.0),
    ], axis=-1)
    edges = 40.0 * ((xx // 24 + yy // 24) % 2)[..., None]
    noise = rng.normal(0.0, 6.0, size=(height, width, 3))
    return np.clip(np.round(base + edges + noise), 0, 255)


def make_mid_range(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Low-contrast content that stays away from the clamp limits after coding."""
    rng = np.random.default_rng(seed)
    return np.round(rng.uniform(90.0, 160.0, size=(height, width, 3)))


def write_png(path: Path, rgb: np.ndarray) -> Path:
    Image.fromarray(rgb.astype(np.uint8)).save(path, format="PNG")
    return path


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Fresh settings per test, console logging only."""
    monkeypatch.setenv("LOG_FILE", "")
    monkeypatch.setenv("QTUNE_THREADS", "2")
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def natural_image() -> ImagePlanes:
    return ImagePlanes.from_array(make_natural(32, 40))


@pytest.fixture
def image_dir(tmp_path) -> Path:
    """Four small PNG images with different content."""
    directory = tmp_path / "images"
    directory.mkdir()
    for i in range(4):
        write_png(directory / f"img{i}.png", make_natural(48, 64, seed=i))
    return directory
