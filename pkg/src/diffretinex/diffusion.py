"""Denoising-diffusion mathematics: schedules, forward corruption, reverse sampling, losses.

The algebraic operations accept numpy arrays or torch tensors interchangeably;
schedule coefficients are python floats in float64 precision. Only
:func:`sample_loop` is torch-specific (it drives a torch denoiser).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericError

# Below this, 1/sqrt(alpha_bar) amplifies by >1e12 and x0 estimates are meaningless.
ALPHA_BAR_FLOOR = 1e-24


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise tables: beta, alpha = 1-beta, alpha_bar = cumprod(alpha),
    and the reverse-posterior variance sigma2[t] = (1-alpha_bar[t-1])/(1-alpha_bar[t]) * beta[t]
    with alpha_bar[-1] taken as 1 (so sigma2[0] = 0)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def check_step(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise InputError(f"step {t} outside schedule of length {self.T}")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced beta over T steps with all derived tables precomputed."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return schedule_from_betas(beta)


def schedule_from_betas(beta: np.ndarray) -> NoiseSchedule:
    """Derive alpha/alpha_bar/sigma2 tables from an explicit beta array."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ConfigError(f"beta must be a non-empty 1-d array, got shape {beta.shape}")
    if not np.all((beta > 0) & (beta < 1)):
        raise ConfigError("all beta values must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=beta.size, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def q_sample(x0, t: int, eps, s: NoiseSchedule):
    """Closed-form forward corruption: sqrt(alpha_bar_t)*x0 + sqrt(1-alpha_bar_t)*eps."""
    s.check_step(t)
    ab = s.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def q_sample_step(x_prev, t: int, eps, s: NoiseSchedule):
    """Single forward step: sqrt(alpha_t)*x_prev + sqrt(1-alpha_t)*eps."""
    s.check_step(t)
    a = s.alpha[t]
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * eps


def estimate_x0(x_t, eps_hat, t: int, s: NoiseSchedule, clamp: bool = False):
    """Invert q_sample given a noise estimate: (x_t - sqrt(1-ab_t)*eps_hat)/sqrt(ab_t).

    With ``clamp`` the estimate is clipped to [-1, 1], as done before feeding it
    to the consistency network during training.
    """
    s.check_step(t)
    ab = s.alpha_bar[t]
    if ab < ALPHA_BAR_FLOOR:
        raise NumericError(f"alpha_bar[{t}] = {ab:.3e} underflows the x0 estimate")
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if clamp:
        x0 = x0.clamp(-1.0, 1.0) if isinstance(x0, torch.Tensor) else np.clip(x0, -1.0, 1.0)
    return x0


def _gather(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Per-element schedule coefficients broadcast against a (B, C, H, W) tensor."""
    coeffs = torch.from_numpy(table).to(like.dtype)[t.long()]
    return coeffs.view(-1, *([1] * (like.dim() - 1)))


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """q_sample with a per-batch-element step index."""
    if t.min() < 0 or t.max() >= s.T:
        raise InputError(f"steps outside [0, {s.T})")
    ab = _gather(s.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def estimate_x0_batch(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: torch.Tensor, s: NoiseSchedule, clamp: bool = False
) -> torch.Tensor:
    """estimate_x0 with a per-batch-element step index."""
    if t.min() < 0 or t.max() >= s.T:
        raise InputError(f"steps outside [0, {s.T})")
    if s.alpha_bar[t.long().numpy()].min() < ALPHA_BAR_FLOOR:
        raise NumericError("alpha_bar underflows the x0 estimate")
    ab = _gather(s.alpha_bar, t, x_t)
    x0 = (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    return x0.clamp(-1.0, 1.0) if clamp else x0


def posterior_mean(x_t, eps_hat, t: int, s: NoiseSchedule, printed_form: bool = False):
    """Reverse-step mean (1/sqrt(alpha_t)) * (x_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat).

    ``printed_form`` switches the correction denominator from sqrt(1-alpha_bar_t)
    to (1-alpha_bar_t); kept only for A/B comparison, the default is the form that
    makes sampling with a perfect noise estimate recover x0.
    """
    s.check_step(t)
    ab = s.alpha_bar[t]
    denom = (1.0 - ab) if printed_form else math.sqrt(1.0 - ab)
    coeff = s.beta[t] / denom
    return (x_t - coeff * eps_hat) / math.sqrt(s.alpha[t])


def p_sample(x_t, eps_hat, t: int, s: NoiseSchedule, z, printed_form: bool = False):
    """One reverse draw: posterior mean plus sigma_t * z; z is forced to zero at t=0."""
    mu = posterior_mean(x_t, eps_hat, t, s, printed_form=printed_form)
    if t == 0:
        return mu
    return mu + math.sqrt(s.sigma2[t]) * z


def sample_loop(
    condition: torch.Tensor,
    denoiser: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    s: NoiseSchedule,
    seed: int,
    target_channels: int,
    printed_form: bool = False,
) -> torch.Tensor:
    """Run the full reverse chain from unit Gaussian noise, conditioned on ``condition``.

    ``denoiser(x_t, condition, t)`` predicts the injected noise. Deterministic
    given ``seed``; the result is clamped to [-1, 1].
    """
    if condition.dim() != 4:
        raise InputError(f"condition must be (B, C, H, W), got shape {tuple(condition.shape)}")
    b, _, h, w = condition.shape
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(b, target_channels, h, w, generator=gen, dtype=condition.dtype)
    with torch.no_grad():
        for t in range(s.T - 1, -1, -1):
            eps_hat = denoiser(x, condition, t)
            if eps_hat.shape != x.shape:
                raise ConfigError(
                    f"denoiser returned shape {tuple(eps_hat.shape)}, expected {tuple(x.shape)}"
                )
            z = torch.randn(x.shape, generator=gen, dtype=x.dtype) if t > 0 else 0.0
            x = p_sample(x, eps_hat, t, s, z, printed_form=printed_form)
    return x.clamp(-1.0, 1.0)


def diffusion_loss(eps, eps_hat):
    """Mean absolute error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise InputError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return abs(eps - eps_hat).mean()


def content_loss(x0, x0_refined):
    """Mean absolute error between the clean target and the refined x0 estimate."""
    if x0.shape != x0_refined.shape:
        raise InputError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_refined.shape)}")
    return abs(x0 - x0_refined).mean()


def total_diffusion_loss(l_diff, l_content, gamma_ct: float = 1.0):
    """Combined objective l_diff + gamma_ct * l_content."""
    return l_diff + gamma_ct * l_content
