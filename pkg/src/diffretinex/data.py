"""Image I/O, paired-dataset loading, range mapping and the synthetic corpus generator.

Canonical in-memory format: float32 numpy arrays of shape (H, W, C) with
values in [0, 1]. Canonical on-disk format: 8-bit PNG.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Floor for illumination maps so the pointwise R = I / L inversion stays finite.
MIN_ILLUMINATION = 1e-4


@dataclass
class RetinexDecomposition:
    """Reflectance (H, W, 3) in [0, 1] and illumination (H, W, 1) in (0, 1]."""

    reflectance: np.ndarray
    illumination: np.ndarray

    def __post_init__(self):
        if self.reflectance.ndim != 3 or self.reflectance.shape[2] != 3:
            raise InputError(f"reflectance must be (H, W, 3), got {self.reflectance.shape}")
        if self.illumination.ndim != 3 or self.illumination.shape[2] != 1:
            raise InputError(f"illumination must be (H, W, 1), got {self.illumination.shape}")
        if self.reflectance.shape[:2] != self.illumination.shape[:2]:
            raise InputError(
                f"reflectance {self.reflectance.shape[:2]} and illumination "
                f"{self.illumination.shape[:2]} disagree on spatial size"
            )


@dataclass
class PairedSample:
    """A low-light/normal-light image pair, optionally with ground-truth decompositions."""

    low: np.ndarray
    normal: np.ndarray
    id: str
    gt_low: RetinexDecomposition | None = None
    gt_normal: RetinexDecomposition | None = None


@dataclass
class SynthConfig:
    """Knobs of the synthetic paired-illumination generator."""

    patch_size: int = 48
    illum_cells: int = 2          # control points per axis of the smooth illumination field
    texture_octaves: int = 4
    gamma_range: tuple[float, float] = (1.5, 3.0)
    gain_range: tuple[float, float] = (0.1, 0.3)
    sigma_range: tuple[float, float] = (0.01, 0.04)
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 2:
            raise ConfigError(f"patch_size must be >= 2, got {self.patch_size}")
        if self.illum_cells < 1:
            raise ConfigError(f"illum_cells must be >= 1, got {self.illum_cells}")
        if self.texture_octaves < 1:
            raise ConfigError(f"texture_octaves must be >= 1, got {self.texture_octaves}")
        for name, (lo, hi) in (
            ("gamma_range", self.gamma_range),
            ("gain_range", self.gain_range),
            ("sigma_range", self.sigma_range),
        ):
            if not (0 <= lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        if self.gain_range[1] <= 0:
            raise ConfigError("gain_range upper bound must be positive")


def to_model_range(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] image data to the [-1, 1] range the diffusion networks operate in."""
    return (x.astype(np.float64) * 2.0 - 1.0).astype(np.float32)


def from_model_range(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_model_range`."""
    return ((x.astype(np.float64) + 1.0) / 2.0).astype(np.float32)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image file into a float32 (H, W, 3) array in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: unreadable image ({exc})") from exc
    return arr / 255.0


def save_image(path: str | os.PathLike, x: np.ndarray) -> None:
    """Write a float [0, 1] array as an 8-bit PNG. 1-channel maps are saved as grayscale."""
    arr = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def _list_images(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            files[p.stem] = p
    return files


def load_paired_dir(low_dir: str | os.PathLike, normal_dir: str | os.PathLike) -> list[PairedSample]:
    """Load matching-basename image pairs from two directories, in filename order."""
    low_dir, normal_dir = Path(low_dir), Path(normal_dir)
    for d in (low_dir, normal_dir):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    low_files = _list_images(low_dir)
    normal_files = _list_images(normal_dir)

    missing = sorted(set(low_files) ^ set(normal_files))
    if missing:
        raise InputError(
            "unmatched filenames between low/normal directories: " + ", ".join(missing)
        )

    samples = []
    for stem in sorted(low_files):
        low = load_image(low_files[stem])
        normal = load_image(normal_files[stem])
        if low.shape != normal.shape:
            raise InputError(
                f"{stem}: low {low.shape} and normal {normal.shape} differ in size"
            )
        samples.append(PairedSample(low=low, normal=normal, id=stem))
    return samples


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly interpolate a (n, n) control grid onto a (size, size) field."""
    n = grid.shape[0]
    if n == 1:
        return np.full((size, size), grid[0, 0])
    pos = np.linspace(0.0, n - 1.0, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    frac = pos - i0
    rows = grid[i0, :] * (1 - frac)[:, None] + grid[i0 + 1, :] * frac[:, None]
    return rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _value_noise(rng: np.random.Generator, size: int, octaves: int, base_cells: int = 2) -> np.ndarray:
    """Multi-octave value noise in [0, 1]: sum of upsampled random grids with halving amplitude."""
    total = np.zeros((size, size))
    weight = 0.0
    amp = 1.0
    for o in range(octaves):
        cells = min(base_cells * 2**o + 1, size)
        grid = rng.random((cells, cells))
        total += amp * _bilinear_upsample(grid, size)
        weight += amp
        amp *= 0.5
    total /= weight
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.full((size, size), 0.5)
    return (total - lo) / (hi - lo)


def generate_synthetic(config: SynthConfig, n: int) -> list[PairedSample]:
    """Build ``n`` paired patches with exact ground-truth decompositions.

    Per sample: reflectance R is a 3-channel texture in [0.1, 1]; normal-light
    illumination L_n is a smooth field in [0.5, 1]; the dark illumination is
    L_l = gain * L_n**gamma; normal = R*L_n exactly, low = clip(R*L_l + noise).
    The shared R makes the reflectance-consistency optimum exactly attainable.
    """
    config.validate()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(config.seed)
    size = config.patch_size

    samples = []
    for i in range(n):
        base = _value_noise(rng, size, config.texture_octaves)
        channels = [
            0.6 * base + 0.4 * _value_noise(rng, size, config.texture_octaves)
            for _ in range(3)
        ]
        reflectance = (0.1 + 0.9 * np.stack(channels, axis=-1)).astype(np.float32)

        l_n = 0.5 + 0.5 * _value_noise(rng, size, 1, base_cells=config.illum_cells)
        gamma = rng.uniform(*config.gamma_range)
        gain = rng.uniform(*config.gain_range)
        l_l = (gain * l_n**gamma)[:, :, None].astype(np.float32)
        l_n = l_n[:, :, None].astype(np.float32)
        sigma = rng.uniform(*config.sigma_range)

        normal = np.clip(reflectance * l_n, 0.0, 1.0)
        low = reflectance * l_l
        if sigma > 0:
            low = low + rng.normal(0.0, sigma, size=low.shape).astype(np.float32)
        low = np.clip(low, 0.0, 1.0)

        samples.append(
            PairedSample(
                low=low.astype(np.float32),
                normal=normal,
                id=f"synth-{i:04d}",
                gt_low=RetinexDecomposition(reflectance, l_l),
                gt_normal=RetinexDecomposition(reflectance, l_n),
            )
        )
    return samples


def write_corpus(samples: Sequence[PairedSample], root: str | os.PathLike) -> None:
    """Write samples to ``<root>/low|high`` plus ``gt_*`` map directories when present."""
    root = Path(root)
    dirs = {"low": root / "low", "high": root / "high"}
    has_gt = all(s.gt_low is not None and s.gt_normal is not None for s in samples)
    if has_gt:
        dirs.update(
            gt_r=root / "gt_r", gt_l_low=root / "gt_l_low", gt_l_high=root / "gt_l_high"
        )
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(dirs["low"] / f"{s.id}.png", s.low)
        save_image(dirs["high"] / f"{s.id}.png", s.normal)
        if has_gt:
            save_image(dirs["gt_r"] / f"{s.id}.png", s.gt_normal.reflectance)
            save_image(dirs["gt_l_low"] / f"{s.id}.png", s.gt_low.illumination)
            save_image(dirs["gt_l_high"] / f"{s.id}.png", s.gt_normal.illumination)
