"""Tests for PNG/PPM ingestion and padding."""

import numpy as np
import pytest
from PIL import Image

from src.models.errors import ImageFormatError
from src.utils.image_io import image_id, list_images, load_image, read_rgb, save_rgb_png
from tests.conftest import make_natural, write_png


class TestLoadImage:

    def test_pads_to_block_multiple(self, tmp_path):
        path = write_png(tmp_path / "small.png", make_natural(10, 10))
        image = load_image(path)
        assert image.pixels.shape == (16, 16, 3)
        assert (image.width, image.height) == (10, 10)
        assert (image.pad_right, image.pad_bottom) == (6, 6)
        np.testing.assert_array_equal(image.pixels[15, 15], image.pixels[9, 9])

    def test_no_padding_when_aligned(self, tmp_path):
        path = write_png(tmp_path / "aligned.png", make_natural(512, 768))
        image = load_image(path)
        assert (image.blocks_y, image.blocks_x) == (64, 96)
        assert image.pad_right == 0 and image.pad_bottom == 0

    def test_binary_ppm(self, tmp_path):
        pixels = np.arange(4 * 3 * 3, dtype=np.uint8).reshape(3, 4, 3)
        path = tmp_path / "tiny.ppm"
        path.write_bytes(b"P6\n# comment\n4 3\n255\n" + pixels.tobytes())
        np.testing.assert_array_equal(read_rgb(path), pixels.astype(np.float64))

    def test_save_and_reload(self, tmp_path):
        original = make_natural(12, 20)
        path = save_rgb_png(original, tmp_path / "out" / "saved.png")
        np.testing.assert_array_equal(read_rgb(path), original)


class TestRejections:

    def test_grayscale_png(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(path)
        with pytest.raises(ImageFormatError) as exc:
            load_image(path)
        assert "grayscale" in str(exc.value)

    def test_rgba_png(self, tmp_path):
        path = tmp_path / "alpha.png"
        Image.fromarray(np.zeros((8, 8, 4), dtype=np.uint8)).save(path)
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_grayscale_ppm(self, tmp_path):
        path = tmp_path / "gray.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_sixteen_bit_ppm(self, tmp_path):
        path = tmp_path / "deep.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_corrupted_header_names_file(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\n" + b"\x00" * 10)
        with pytest.raises(ImageFormatError) as exc:
            load_image(path)
        assert "broken.png" in str(exc.value)

    def test_truncated_data(self, tmp_path):
        good = write_png(tmp_path / "good.png", make_natural(32, 32))
        path = tmp_path / "cut.png"
        path.write_bytes(good.read_bytes()[:60])
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_unknown_format(self, tmp_path):
        path = tmp_path / "notes.png"
        path.write_text("not an image")
        with pytest.raises(ImageFormatError):
            load_image(path)


class TestListImages:

    def test_sorted_directory(self, image_dir):
        (image_dir / "readme.txt").write_text("ignore me")
        names = [p.name for p in list_images(image_dir)]
        assert names == ["img0.png", "img1.png", "img2.png", "img3.png"]

    def test_single_file(self, image_dir):
        assert list_images(image_dir / "img2.png") == [image_dir / "img2.png"]

    def test_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            list_images(tmp_path / "nowhere")

    def test_image_id(self):
        assert image_id("/data/kodak/kodim07.png") == "kodim07"
