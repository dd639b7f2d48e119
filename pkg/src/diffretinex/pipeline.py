"""End-to-end inference: decompose, adjust both maps by conditional diffusion, recompose."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import MIN_ILLUMINATION, RetinexDecomposition, from_model_range, to_model_range
from .denoisers import UNetDenoiser
from .diffusion import NoiseSchedule, sample_loop
from .errors import InputError
from .tdn import DecomNet, decompose


@dataclass
class EnhanceResult:
    """Outputs of one enhancement run; ``enhanced`` is exactly
    clip(adjusted_reflectance * adjusted_illumination, 0, 1)."""

    enhanced: np.ndarray
    adjusted_reflectance: np.ndarray
    adjusted_illumination: np.ndarray
    decomposition: RetinexDecomposition
    seed: int


def split_seed(seed: int, streams: int = 2) -> list[int]:
    """Derive disjoint child seeds from one master seed."""
    children = np.random.SeedSequence(int(seed)).spawn(streams)
    return [int(c.generate_state(1, np.uint64)[0] & (2**63 - 1)) for c in children]


def _map_to_tensor(map_hwc: np.ndarray, channels: int, name: str) -> torch.Tensor:
    arr = np.asarray(map_hwc)
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise InputError(f"{name} must be (H, W, {channels}), got shape {arr.shape}")
    x = to_model_range(arr.astype(np.float32))
    return torch.from_numpy(x).permute(2, 0, 1).unsqueeze(0)


def _sample_map(
    cond_map: np.ndarray, denoiser: UNetDenoiser, s: NoiseSchedule, seed: int, channels: int, name: str
) -> np.ndarray:
    cond = _map_to_tensor(cond_map, channels, name)
    out = sample_loop(cond, denoiser, s, seed, target_channels=channels)
    return from_model_range(out[0].permute(1, 2, 0).numpy())


def adjust_reflectance(
    r_map: np.ndarray, denoiser: UNetDenoiser, s: NoiseSchedule, seed: int
) -> np.ndarray:
    """Sample a normal-light reflectance conditioned on the decomposed map."""
    return np.clip(_sample_map(r_map, denoiser, s, seed, 3, "reflectance"), 0.0, 1.0)


def adjust_illumination(
    l_map: np.ndarray, denoiser: UNetDenoiser, s: NoiseSchedule, seed: int
) -> np.ndarray:
    """Sample a normal-light illumination conditioned on the decomposed map."""
    out = _sample_map(l_map, denoiser, s, seed, 1, "illumination")
    return np.clip(out, MIN_ILLUMINATION, 1.0)


def _pad_to_multiple(image: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[:2]
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h == 0 and pad_w == 0:
        return image, (h, w)
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect"), (h, w)


def enhance(
    low: np.ndarray,
    decomposer: DecomNet,
    rda_denoiser: UNetDenoiser,
    ida_denoiser: UNetDenoiser,
    schedule_r: NoiseSchedule,
    schedule_i: NoiseSchedule,
    seed: int,
) -> EnhanceResult:
    """Full pipeline on an (H, W, 3) image in [0, 1].

    Images whose sides are not multiples of the decomposer's downsampling
    factor are reflect-padded, processed, and cropped back. The reflectance and
    illumination paths draw from disjoint seed streams split off ``seed``.
    """
    arr = np.asarray(low)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    padded, (h, w) = _pad_to_multiple(arr.astype(np.float32), decomposer.descriptor.downsample_factor)

    dec = decompose(padded, decomposer)
    seed_r, seed_i = split_seed(seed, 2)
    r_adj = adjust_reflectance(dec.reflectance, rda_denoiser, schedule_r, seed_r)
    l_adj = adjust_illumination(dec.illumination, ida_denoiser, schedule_i, seed_i)

    dec = RetinexDecomposition(dec.reflectance[:h, :w], dec.illumination[:h, :w])
    r_adj = r_adj[:h, :w]
    l_adj = l_adj[:h, :w]
    enhanced = np.clip(r_adj * l_adj, 0.0, 1.0)
    return EnhanceResult(
        enhanced=enhanced,
        adjusted_reflectance=r_adj,
        adjusted_illumination=l_adj,
        decomposition=dec,
        seed=seed,
    )
