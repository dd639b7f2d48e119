import math

import numpy as np
import pytest

from diffretinex.errors import InputError
from diffretinex.metrics import (
    LOE_GRID,
    MetricReport,
    SSIM_SIGMA,
    SSIM_WINDOW,
    loe,
    psnr,
    ssim,
    _gaussian_kernel,
)


# --------------------------------------------------------------------------
# PSNR
# --------------------------------------------------------------------------


def test_psnr_identity_sentinel():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(img, img) == math.inf


def test_psnr_uniform_offset_oracle():
    img = np.full((16, 16, 3), 0.5)
    shifted = img + 16.0 / 255.0
    expected = 20.0 * math.log10(255.0 / 16.0)  # = 24.048 dB
    assert psnr(img, shifted) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(24.03, abs=0.05)


def test_psnr_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3)) * 0.5 + 0.25
    values = []
    for sigma in (0.01, 0.05, 0.1):
        noisy = img + np.random.default_rng(3).normal(0, sigma, img.shape)
        values.append(psnr(img, noisy))
    assert values[0] > values[1] > values[2]


def test_psnr_shape_mismatch():
    with pytest.raises(InputError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------


def brute_force_ssim(a, b):
    """Per-window loop oracle with the same Gaussian weighting, valid mode."""
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    window = np.outer(kernel, kernel)
    c1, c2 = 0.01**2, 0.03**2
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    h, w, channels = a.shape
    values = []
    for ch in range(channels):
        scores = []
        for i in range(h - SSIM_WINDOW + 1):
            for j in range(w - SSIM_WINDOW + 1):
                x = a[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW, ch]
                y = b[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW, ch]
                mx = (window * x).sum()
                my = (window * y).sum()
                vx = (window * x * x).sum() - mx**2
                vy = (window * y * y).sum() - my**2
                cov = (window * x * y).sum() - mx * my
                scores.append(
                    ((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx**2 + my**2 + c1) * (vx + vy + c2))
                )
        values.append(np.mean(scores))
    return float(np.mean(values))


def test_ssim_identity():
    img = np.random.default_rng(4).random((24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_matches_brute_force():
    idx = np.indices((16, 16)).sum(axis=0) % 2
    a = idx.astype(np.float64)
    b = 1.0 - a
    assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), abs=1e-12)


def test_ssim_random_matches_brute_force():
    rng = np.random.default_rng(5)
    a = rng.random((14, 17, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), abs=1e-12)


def test_ssim_symmetric():
    rng = np.random.default_rng(6)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_too_small_raises():
    with pytest.raises(InputError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# --------------------------------------------------------------------------
# LOE
# --------------------------------------------------------------------------


def test_loe_identity_zero():
    img = np.random.default_rng(7).random((64, 64, 3))
    assert loe(img, img) == 0.0


def test_loe_monotone_gamma_zero():
    img = np.random.default_rng(8).random((60, 60, 3))
    assert loe(img, img**2.2) == 0.0
    assert loe(img, np.sqrt(img)) == 0.0


def test_loe_inversion_is_maximal_among_transforms():
    img = np.random.default_rng(9).random((60, 60, 3))
    candidates = {
        "identity": img,
        "gamma": img**0.5,
        "scaled": 0.5 * img,
        "inverted": 1.0 - img,
    }
    scores = {name: loe(img, out) for name, out in candidates.items()}
    assert max(scores, key=scores.get) == "inverted"
    assert scores["identity"] == 0.0


def test_loe_matches_brute_force_pairwise():
    rng = np.random.default_rng(10)
    orig = rng.random((LOE_GRID, LOE_GRID, 3))
    enh = rng.random((LOE_GRID, LOE_GRID, 3))
    lo = orig.max(axis=2).ravel()
    le = enh.max(axis=2).ravel()
    n = lo.size
    count = 0
    for i in range(n):
        count += int(np.sum((lo[i] >= lo) != (le[i] >= le)))
    expected = count / (n * n) * 1000.0
    assert loe(orig, enh) == pytest.approx(expected, abs=1e-9)


def test_loe_downsampling_deterministic():
    img = np.random.default_rng(11).random((123, 77, 3))
    enh = 1.0 - img
    assert loe(img, enh) == loe(img, enh)


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def test_report_aggregates_are_means():
    report = MetricReport()
    report.add("a", 20.0, 0.8, 100.0)
    report.add("b", 30.0, 0.6, 200.0)
    assert report.mean_psnr == pytest.approx(25.0)
    assert report.mean_ssim == pytest.approx(0.7)
    assert report.mean_loe == pytest.approx(150.0)
    csv = report.to_csv()
    assert csv.splitlines()[0] == "id,psnr_db,ssim,loe"
    assert csv.splitlines()[-1].startswith("mean,")
    assert "a" in report.to_table()
