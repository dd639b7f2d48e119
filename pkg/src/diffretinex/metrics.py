"""Evaluation metrics (PSNR, SSIM, lightness-order error) and report assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LOE_GRID = 50


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] data; identical inputs give +inf."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _window_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode filtering of a 2-d image."""
    n = kernel.size
    h, w = img.shape
    out = np.zeros((h - n + 1, w))
    for i in range(n):
        out += kernel[i] * img[i : i + h - n + 1, :]
    out2 = np.zeros((h - n + 1, w - n + 1))
    for j in range(n):
        out2 += kernel[j] * out[:, j : j + w - n + 1]
    return out2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) averaged over valid windows and channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InputError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _window_filter(x, kernel)
        my = _window_filter(y, kernel)
        mxx = _window_filter(x * x, kernel)
        myy = _window_filter(y * y, kernel)
        mxy = _window_filter(x * y, kernel)
        vx = mxx - mx**2
        vy = myy - my**2
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        values.append(s.mean())
    return float(np.mean(values))


def _lightness_grid(img: np.ndarray) -> np.ndarray:
    """Max-channel lightness sampled on a deterministic LOE_GRID x LOE_GRID grid."""
    if img.ndim == 2:
        img = img[:, :, None]
    light = img.max(axis=2)
    h, w = light.shape
    rows = np.linspace(0, h - 1, LOE_GRID).round().astype(int)
    cols = np.linspace(0, w - 1, LOE_GRID).round().astype(int)
    return light[np.ix_(rows, cols)].ravel()


def loe(original: np.ndarray, enhanced: np.ndarray) -> float:
    """Lightness-order error: fraction of grid pixel pairs whose brightness order
    flips between original and enhanced, scaled by 1000."""
    original, enhanced = _check_pair(original, enhanced)
    lo = _lightness_grid(original)
    le = _lightness_grid(enhanced)
    order_o = lo[:, None] >= lo[None, :]
    order_e = le[:, None] >= le[None, :]
    return float((order_o != order_e).mean() * 1000.0)


@dataclass
class MetricReport:
    """Per-image metric rows plus their means."""

    ids: list[str] = field(default_factory=list)
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)
    loe_values: list[float] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_value: float, loe_value: float) -> None:
        self.ids.append(image_id)
        self.psnr_values.append(psnr_db)
        self.ssim_values.append(ssim_value)
        self.loe_values.append(loe_value)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def mean_loe(self) -> float:
        return float(np.mean(self.loe_values))

    def to_csv(self) -> str:
        lines = ["id,psnr_db,ssim,loe"]
        for i, image_id in enumerate(self.ids):
            lines.append(
                f"{image_id},{self.psnr_values[i]:.6g},{self.ssim_values[i]:.6g},"
                f"{self.loe_values[i]:.6g}"
            )
        lines.append(f"mean,{self.mean_psnr:.6g},{self.mean_ssim:.6g},{self.mean_loe:.6g}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'id':<16} {'PSNR(dB)':>10} {'SSIM':>8} {'LOE':>8}"
        rows = [header, "-" * len(header)]
        for i, image_id in enumerate(self.ids):
            rows.append(
                f"{image_id:<16} {self.psnr_values[i]:>10.3f} "
                f"{self.ssim_values[i]:>8.4f} {self.loe_values[i]:>8.2f}"
            )
        rows.append("-" * len(header))
        rows.append(
            f"{'mean':<16} {self.mean_psnr:>10.3f} {self.mean_ssim:>8.4f} {self.mean_loe:>8.2f}"
        )
        return "\n".join(rows) + "\n"


def evaluate_pair(image_id: str, reference: np.ndarray, candidate: np.ndarray) -> tuple:
    return image_id, psnr(reference, candidate), ssim(reference, candidate), loe(reference, candidate)
