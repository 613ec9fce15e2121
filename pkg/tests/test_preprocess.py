"""Preprocessing: resize, color split, histogram equalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslface import preprocess
from sslface.errors import DataError


def bilinear_oracle(img: np.ndarray, out_w: int, out_h: int, r: int, c: int) -> float:
    """Direct scalar evaluation of half-pixel-center bilinear interpolation."""
    h, w = img.shape[:2]
    sr = min(max((r + 0.5) * (h / out_h) - 0.5, 0.0), h - 1.0)
    sc = min(max((c + 0.5) * (w / out_w) - 0.5, 0.0), w - 1.0)
    r0, c0 = int(np.floor(sr)), int(np.floor(sc))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = sr - r0, sc - c0
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return float(np.floor(top * (1 - fr) + bot * fr + 0.5))


class TestResize:
    def test_identity_resize_is_bit_identical(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        out = preprocess.resize_bilinear(img, 32, 32)
        assert out.dtype == np.uint8
        assert np.array_equal(out, img)

    def test_constant_image_upscale_stays_constant(self):
        img = np.full((2, 2, 3), 100, dtype=np.uint8)
        out = preprocess.resize_bilinear(img, 4, 4)
        assert out.shape == (4, 4, 3)
        assert np.all(out == 100)

    def test_downscale_matches_formula_at_probe_pixels(self):
        rr, cc = np.mgrid[0:64, 0:64]
        img = (2 * rr + cc).astype(np.float64)  # linear ramp, max 189
        out = preprocess.resize_bilinear(img.astype(np.uint8), 32, 32)
        for r, c in [(0, 0), (10, 3), (15, 28), (31, 0), (31, 31)]:
            assert out[r, c] == bilinear_oracle(img, 32, 32, r, c)
        # linear field: interpolation is exact, so out = 4r + 2c + 2 after rounding
        assert out[5, 7] == 4 * 5 + 2 * 7 + 2

    def test_output_dimensions_and_range(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
        out = preprocess.resize_bilinear(img, 9, 40)
        assert out.shape == (40, 9, 3)
        assert out.min() >= 0 and out.max() <= 255

    def test_empty_target_rejected(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(DataError):
            preprocess.resize_bilinear(img, 0, 4)


class TestYCbCr:
    def test_gray_is_chroma_neutral(self):
        img = np.full((2, 2, 3), 128, dtype=np.uint8)
        y, crcb = preprocess.to_ycbcr(img)
        assert np.allclose(y, 128)
        assert np.allclose(crcb, 128)

    def test_white(self):
        img = np.full((1, 1, 3), 255, dtype=np.uint8)
        y, crcb = preprocess.to_ycbcr(img)
        assert np.allclose(y, 255)
        assert np.allclose(crcb, 128)

    def test_pure_red_matches_bt601_full_range(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0, 0] = 255
        y, crcb = preprocess.to_ycbcr(img)
        assert y[0, 0, 0] == pytest.approx(76.245, abs=1e-9)
        assert crcb[0, 0, 0] == 255.0  # Cr = 255.5 clamped
        assert crcb[0, 0, 1] == pytest.approx(84.97232, abs=1e-5)

    def test_channel_order_is_cr_then_cb(self):
        # pure blue pushes Cb far above neutral and Cr below
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0, 2] = 255
        _, crcb = preprocess.to_ycbcr(img)
        assert crcb[0, 0, 1] > 200  # Cb
        assert crcb[0, 0, 0] < 128  # Cr

    def test_round_trip_within_one_gray_level(self):
        rng = np.random.default_rng(11)
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        y, crcb = preprocess.to_ycbcr(img)
        back = preprocess.from_ycbcr(y, crcb)
        assert np.max(np.abs(back.astype(int) - img.astype(int))) <= 1


class TestHistEqualize:
    def test_half_black_half_white_unchanged(self):
        img = np.zeros((4, 4), dtype=np.float64)
        img[:2] = 255.0
        out = preprocess.hist_equalize(img)
        assert np.array_equal(out, img)

    def test_constant_image_returned_unchanged(self):
        img = np.full((5, 5), 77.0)
        out = preprocess.hist_equalize(img)
        assert np.array_equal(out, img)

    def test_hand_computed_cdf_remap(self):
        # levels 52,55,59,61 have cdf 1,2,3,4; h = round((cdf-1)/3*255)
        img = np.array([[52.0, 55.0], [61.0, 59.0]])
        out = preprocess.hist_equalize(img)
        assert np.array_equal(out, np.array([[0.0, 85.0], [255.0, 170.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=255), min_size=4, max_size=64))
    def test_rank_order_preserved(self, values):
        img = np.array(values, dtype=np.float64).reshape(1, -1)
        out = preprocess.hist_equalize(img).ravel()
        inp = img.ravel()
        for i in range(len(inp)):
            for j in range(len(inp)):
                if inp[i] < inp[j]:
                    assert out[i] <= out[j]
                elif inp[i] == inp[j]:
                    assert out[i] == out[j]

    def test_output_range(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 255, size=(32, 32))
        out = preprocess.hist_equalize(img)
        assert out.min() >= 0 and out.max() <= 255

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            preprocess.hist_equalize(np.array([[300.0]]))


class TestFileIO:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        gray = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        preprocess.write_pgm(path, gray)
        back = preprocess.read_image(path)
        assert back.shape == (32, 32, 3)
        assert np.array_equal(back[:, :, 0], gray)
        assert np.array_equal(back[:, :, 1], gray)

    def test_png_read(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(img).save(path)
        assert np.array_equal(preprocess.read_image(path), img)

    def test_unsupported_format_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "img.bmp"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(path)
        with pytest.raises(DataError):
            preprocess.read_image(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            preprocess.read_image(tmp_path / "nope.png")


class TestPipelineHelpers:
    def test_center_crop_square(self):
        img = np.arange(5 * 8 * 3, dtype=np.uint8).reshape(5, 8, 3)
        out = preprocess.center_crop_square(img)
        assert out.shape == (5, 5, 3)
        assert np.array_equal(out, img[:, 1:6])

    def test_flip_is_involution(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
        assert np.array_equal(preprocess.flip_horizontal(preprocess.flip_horizontal(img)), img)
        assert np.array_equal(preprocess.flip_horizontal(img)[2, 0], img[2, 6])

    def test_low_resolution_simulation_keeps_size(self):
        rng = np.random.default_rng(9)
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        out = preprocess.simulate_low_resolution(img, 16)
        assert out.shape == img.shape
        # degradation must lose detail: not a no-op on random content
        assert not np.array_equal(out, img)

    def test_preprocess_image_shapes(self):
        rng = np.random.default_rng(10)
        img = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
        y, crcb = preprocess.preprocess_image(img)
        assert y.shape == (32, 32, 1)
        assert crcb.shape == (32, 32, 2)
        assert np.all(np.isfinite(y)) and np.all(np.isfinite(crcb))

    def test_determinism(self):
        rng = np.random.default_rng(12)
        img = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
        a = preprocess.preprocess_image(img)
        b = preprocess.preprocess_image(img)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
