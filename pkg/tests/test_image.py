import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lirls.errors import DimensionError, FormatError
from lirls.image import (
    MultichannelImage,
    load_image,
    load_pfm,
    metric_report,
    psnr,
    save_image,
    save_pfm,
    ssim,
)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_unit_error_is_zero_db():
    a = np.zeros((1, 4, 4))
    b = np.ones((1, 4, 4))
    assert psnr(a, b, peak=1.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_mse_hundredth_is_twenty_db():
    a = np.zeros((1, 5, 5))
    b = np.full((1, 5, 5), 0.1)
    assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_psnr_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 6, 6))
    b = rng.random((2, 6, 6))
    assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-15)
    perm = rng.permutation(a[0].size)
    ap = a.reshape(2, -1)[:, perm].reshape(a.shape)
    bp = b.reshape(2, -1)[:, perm].reshape(b.shape)
    assert psnr(ap, bp) == pytest.approx(psnr(a, b), rel=1e-12)


def test_ssim_self_similarity():
    a = np.random.default_rng(1).random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_zero_vs_constant_peak():
    a = np.zeros((1, 16, 16))
    b = np.ones((1, 16, 16))
    val = ssim(a, b, peak=1.0)
    # closed form on constant planes: K1^2 / (1 + K1^2)
    assert val == pytest.approx(0.01**2 / (1 + 0.01**2), rel=1e-10)
    assert -1.0 < val < 0.05


def test_ssim_independent_noise_is_low():
    rng = np.random.default_rng(7)
    a = rng.random((1, 64, 64))
    b = rng.random((1, 64, 64))
    assert ssim(a, b) < 0.2


def test_ssim_symmetric():
    rng = np.random.default_rng(3)
    a = rng.random((3, 14, 14))
    b = rng.random((3, 14, 14))
    assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-14)


def test_ssim_too_small_image():
    with pytest.raises(DimensionError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_metric_report_bundle():
    a = np.random.default_rng(5).random((3, 12, 12))
    rep = metric_report(a, a)
    assert rep.psnr == math.inf and rep.ssim == pytest.approx(1.0) and rep.peak == 1.0


def test_pfm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    data = rng.standard_normal((3, 8, 8)).astype(np.float32)
    path = tmp_path / "img.pfm"
    save_pfm(path, data)
    back = load_pfm(path)
    assert back.shape == (3, 8, 8)
    assert np.array_equal(back.astype(np.float32), data)


def test_pfm_gray_round_trip(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    path = tmp_path / "g.pfm"
    save_pfm(path, data)
    assert np.array_equal(load_pfm(path)[0], data[0])


def test_pfm_corrupt_header(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\nnotanumber 4\n-1.0\n" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_pfm(path)


def test_png_8bit_scaling(tmp_path):
    img = np.zeros((3, 4, 4))
    img[:, 0, 0] = 1.0
    path = tmp_path / "x.png"
    save_image(img, path, png_bits=8)
    back = load_image(path)
    assert back.data[0, 0, 0] == pytest.approx(1.0)  # pixel 255 -> 1.0
    assert back.data[0, 1, 1] == 0.0


def test_png_16bit_scaling(tmp_path):
    img = np.full((1, 4, 4), 1.0)
    path = tmp_path / "x16.png"
    save_image(img, path, png_bits=16)
    back = load_image(path)
    assert np.all(back.data == 1.0)  # pixel 65535 -> 1.0


def test_png_round_trip_16bit(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.random((3, 6, 6))
    path = tmp_path / "rt.png"
    save_image(img, path, png_bits=16)
    back = load_image(path).data
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-12


def test_load_missing_and_unsupported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")
    bad = tmp_path / "f.jpg"
    bad.write_bytes(b"junk")
    with pytest.raises(FormatError):
        load_image(bad)


def test_image_validation():
    with pytest.raises(DimensionError):
        MultichannelImage(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        MultichannelImage(np.full((1, 2, 2), np.nan))


def test_image_is_read_only():
    img = MultichannelImage(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0
