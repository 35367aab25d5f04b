import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qualcon import imgproc
from qualcon.rng import RngStream


def rand_img(seed, h=9, w=7):
    return np.random.default_rng(seed).random((h, w, 3))


images = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)),
    elements=st.floats(0, 1, allow_nan=False),
)


class TestResize:
    def test_identity_size_is_bit_identical(self):
        img = rand_img(0)
        out = imgproc.resize_bilinear(img, 9, 7)
        assert np.array_equal(out, img)
        assert out is not img

    @pytest.mark.parametrize("size", [(1, 1), (3, 17), (20, 4)])
    def test_constant_stays_constant(self, size):
        img = np.full((6, 5, 3), 0.5)
        assert np.array_equal(imgproc.resize_bilinear(img, *size), np.full(size + (3,), 0.5))

    def test_two_by_two_to_one_pixel(self):
        # centre of the 1x1 output maps to input coordinate (0.5, 0.5): equal weights on all four
        img = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]])[..., None], 3, axis=2)
        out = imgproc.resize_bilinear(img, 1, 1)
        assert out.shape == (1, 1, 3)
        assert np.allclose(out, 0.5, atol=0, rtol=0)

    def test_upsample_matches_hand_weights(self):
        # 1x2 row [0, 1] -> 1x4: positions -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1
        img = np.zeros((1, 2, 3))
        img[0, 1] = 1.0
        out = imgproc.resize_bilinear(img, 1, 4)[0, :, 0]
        assert np.allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            imgproc.resize_bilinear(rand_img(1), 0, 3)


class TestBlur:
    def test_sigma_zero_identity(self):
        img = rand_img(2)
        assert np.array_equal(imgproc.gaussian_blur(img, 0), img)

    def test_subnormal_sigma_is_identity(self):
        img = rand_img(3)
        assert np.array_equal(imgproc.gaussian_blur(img, 4e-280), img)

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5, 7.0])
    def test_constant_preserved_exactly(self, sigma):
        img = np.full((5, 8, 3), 0.3721)
        assert np.array_equal(imgproc.gaussian_blur(img, sigma), img)

    def test_impulse_row_gives_folded_taps(self):
        # independent oracle: taps for d in -3..3, then fold reflect-101 padding by hand
        sigma = 1.0
        d = np.arange(-3, 4)
        w = np.exp(-(d**2) / (2 * sigma**2))
        w /= w.sum()
        row = [0, 0, 1, 0, 0]
        n = len(row)

        def reflect(i):
            while i < 0 or i >= n:
                i = -i if i < 0 else 2 * (n - 1) - i
            return i

        expected = [sum(w[k] * row[reflect(x + d[k])] for k in range(7)) for x in range(n)]
        img = np.repeat(np.array(row, dtype=float)[None, :, None], 3, axis=2)
        out = imgproc.gaussian_blur(img, sigma)
        # the vertical pass on a single row folds onto itself and leaves it unchanged
        assert np.allclose(out[0, :, 1], expected, atol=1e-15)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            imgproc.gaussian_blur(rand_img(3), -0.1)

    def test_mass_conserved_away_from_borders(self):
        img = np.zeros((31, 31, 3))
        img[15, 15] = 1.0
        out = imgproc.gaussian_blur(img, 1.5)
        assert math.isclose(out[..., 0].sum(), 1.0, rel_tol=1e-12)


class TestFlipCropGray:
    def test_flip_involution(self):
        img = rand_img(4)
        assert np.array_equal(imgproc.flip_horizontal(imgproc.flip_horizontal(img)), img)

    def test_flip_row(self):
        img = np.array([[[0.1] * 3, [0.9] * 3]])
        assert np.array_equal(imgproc.flip_horizontal(img), img[:, ::-1])
        assert imgproc.flip_horizontal(img)[0, 0, 0] == 0.9

    def test_flip_symmetric_image(self):
        half = rand_img(5, 4, 3)
        img = np.concatenate([half, half[:, ::-1]], axis=1)
        assert np.array_equal(imgproc.flip_horizontal(img), img)

    def test_crop_full_and_single(self):
        img = rand_img(6)
        assert np.array_equal(imgproc.crop(img, 0, 0, 9, 7), img)
        assert np.array_equal(imgproc.crop(img, 4, 2, 1, 1)[0, 0], img[4, 2])

    def test_disjoint_crops_of_constant(self):
        img = np.full((10, 10, 3), 0.25)
        assert np.array_equal(imgproc.crop(img, 0, 0, 3, 3), imgproc.crop(img, 6, 6, 3, 3))

    @pytest.mark.parametrize("box", [(-1, 0, 2, 2), (0, 0, 10, 1), (8, 6, 2, 2), (0, 0, 0, 1)])
    def test_crop_out_of_bounds(self, box):
        with pytest.raises(ValueError):
            imgproc.crop(rand_img(7), *box)

    def test_gray_red(self):
        out = imgproc.to_grayscale(np.array([[[1.0, 0.0, 0.0]]]))
        assert np.allclose(out, 0.299, atol=1e-15)

    def test_gray_fixed_point(self):
        v = np.random.default_rng(8).random((4, 4, 1))
        img = np.repeat(v, 3, axis=2)
        assert np.array_equal(imgproc.to_grayscale(img), img)

    def test_gray_weighted_sum(self):
        out = imgproc.to_grayscale(np.array([[[0.2, 0.4, 0.6]]]))
        expected = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6  # 0.363
        assert np.allclose(out, expected, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(images, st.integers(1, 15), st.integers(1, 15), st.floats(0, 4))
def test_range_and_determinism(img, oh, ow, sigma):
    ops = [
        lambda x: imgproc.resize_bilinear(x, oh, ow),
        lambda x: imgproc.gaussian_blur(x, sigma),
        imgproc.flip_horizontal,
        imgproc.to_grayscale,
    ]
    for op in ops:
        a, b = op(img), op(img)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestIO:
    def test_ppm_roundtrip(self, tmp_path):
        img = imgproc.from_uint8(np.random.default_rng(9).integers(0, 256, (5, 6, 3)))
        imgproc.write_ppm(tmp_path / "a.ppm", img)
        assert np.array_equal(imgproc.read_ppm(tmp_path / "a.ppm"), img)

    def test_ppm_header_with_comment(self, tmp_path):
        raw = b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
        (tmp_path / "c.ppm").write_bytes(raw)
        img = imgproc.read_ppm(tmp_path / "c.ppm")
        assert img.shape == (1, 2, 3)
        assert np.array_equal(img[0, 0], [1, 0, 0])

    def test_png_roundtrip(self, tmp_path):
        img = imgproc.from_uint8(np.random.default_rng(10).integers(0, 256, (4, 3, 3)))
        imgproc.write_image(tmp_path / "a.png", img)
        assert np.array_equal(imgproc.read_image(tmp_path / "a.png"), img)

    def test_export_rounding(self):
        assert imgproc.to_uint8(np.array([[[0.0, 0.5, 1.0]]])).tolist() == [[[0, 128, 255]]]


# ------------------------------------------------------------------ RngStream


def test_stream_is_pure_function_of_seed_and_path():
    a = RngStream(42).child("epoch", 3, "image", 7).generator().random(100)
    RngStream(42).child("other").generator().random(1000)
    b = RngStream(42).child("epoch", 3).child("image", 7).generator().random(100)
    assert np.array_equal(a, b)


def test_labels_are_typed():
    x = RngStream(1).child(3).generator().random()
    y = RngStream(1).child("3").generator().random()
    assert x != y


def test_stream_reproducible_across_processes():
    code = (
        "from qualcon.rng import RngStream;import hashlib;"
        "print(hashlib.sha256(RngStream(2024).child('e',1,'i',9).generator().random(10000).tobytes()).hexdigest())"
    )
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    import hashlib

    here = hashlib.sha256(RngStream(2024).child("e", 1, "i", 9).generator().random(10000).tobytes()).hexdigest()
    assert runs[0] == runs[1] == here + "\n"


def test_sibling_streams_uniform():
    from scipy.stats import chisquare

    for label in range(5):
        draws = RngStream(7).child("sib", label).generator().random(10000)
        counts = np.bincount((draws * 16).astype(int), minlength=16)
        assert chisquare(counts).pvalue > 0.001
    a = RngStream(7).child("sib", 0).generator().random(10000)
    b = RngStream(7).child("sib", 1).generator().random(10000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_seed_must_be_64_bit():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)
