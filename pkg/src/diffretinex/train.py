"""Seeded training loops for the decomposition stage and the two diffusion stages."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .data import PairedSample, generate_synthetic, load_paired_dir, to_model_range
from .denoisers import build_refiner, UNetDenoiser
from .diffusion import (
    diffusion_loss,
    content_loss,
    estimate_x0_batch,
    make_linear_schedule,
    q_sample_batch,
)
from .errors import ConfigError, NumericError
from .tdn import DecomNet, total_decomposition_loss


@dataclass
class TrainResult:
    checkpoint_path: Path
    trace_path: Path
    trace: list[dict]


def load_training_data(cfg: TrainConfig) -> list[PairedSample]:
    if cfg.data.kind == "synthetic":
        return generate_synthetic(cfg.data.synth, cfg.data.n_samples)
    return load_paired_dir(cfg.data.low_dir, cfg.data.normal_dir)


def draw_timesteps(rng: np.random.Generator, T: int, batch: int) -> np.ndarray:
    """Uniform step indices in [0, T), one per batch element."""
    return rng.integers(0, T, size=batch)


def _to_bchw(stacked: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(stacked.astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _sample_batch(
    samples: list[PairedSample], batch: int, patch: int, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Random patch crops from random pairs, as (low, normal) BCHW tensors."""
    idx = rng.integers(0, len(samples), size=batch)
    lows, normals = [], []
    for i in idx:
        s = samples[i]
        h, w = s.low.shape[:2]
        if h < patch or w < patch:
            raise ConfigError(f"sample {s.id} ({h}x{w}) smaller than patch {patch}")
        top = int(rng.integers(0, h - patch + 1))
        left = int(rng.integers(0, w - patch + 1))
        lows.append(s.low[top : top + patch, left : left + patch])
        normals.append(s.normal[top : top + patch, left : left + patch])
    return _to_bchw(np.stack(lows)), _to_bchw(np.stack(normals))


def _write_trace(path: Path, trace: list[dict]) -> None:
    columns = list(trace[0].keys()) if trace else ["iteration", "total"]
    lines = [",".join(columns)]
    for row in trace:
        lines.append(
            ",".join(
                str(row[c]) if c == "iteration" else f"{row[c]:.9e}" for c in columns
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _check_finite(value: float, iteration: int, parts: dict) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        raise NumericError(f"loss diverged at iteration {iteration}: {detail}")


def train_tdn(cfg: TrainConfig) -> TrainResult:
    """Train the decomposition network on paired low/normal exposures."""
    cfg.validate()
    if cfg.stage != "tdn":
        raise ConfigError(f"train_tdn called with stage {cfg.stage!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = load_training_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    torch.set_flush_denormal(True)
    model = DecomNet(cfg.decomposer)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    w = cfg.loss_weights

    trace = []
    for it in range(1, cfg.iterations + 1):
        low, normal = _sample_batch(samples, cfg.batch_size, cfg.patch_size, rng)
        r, l = model(torch.cat([low, normal]))
        r_low, r_normal = r.chunk(2)
        l_low, l_normal = l.chunk(2)
        terms = total_decomposition_loss(r_low, l_low, r_normal, l_normal, low, normal, w)

        optimizer.zero_grad()
        terms.total.backward()
        optimizer.step()

        row = {
            "iteration": it,
            "reconstruction": float(terms.reconstruction),
            "reflectance_consistency": float(terms.reflectance_consistency),
            "illumination_smoothness": float(terms.illumination_smoothness),
            "total": float(terms.total),
        }
        _check_finite(row["total"], it, row)
        trace.append(row)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            ckpt.save_decomposer(out_dir / f"tdn_{it:06d}.ckpt", model)

    ckpt_path = out_dir / "tdn.ckpt"
    ckpt.save_decomposer(ckpt_path, model, extra={"iterations": cfg.iterations, "seed": cfg.seed})
    trace_path = out_dir / "trace_tdn.csv"
    _write_trace(trace_path, trace)
    return TrainResult(ckpt_path, trace_path, trace)


def _decompose_maps(
    model: DecomNet, images: torch.Tensor, stage: str, batch: int = 32
) -> torch.Tensor:
    """Reflectance or illumination maps for a stack of images, without gradients."""
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            r, l = model(images[i : i + batch])
            outs.append(r if stage == "rda" else l)
    return torch.cat(outs)


def train_diffusion(cfg: TrainConfig, tdn_checkpoint: str | Path) -> TrainResult:
    """Train one diffusion adjustment path (stage "rda" or "ida").

    Conditions are decomposition maps of the low-light image; targets are the
    maps of the paired normal-light image, both from the frozen decomposer.
    """
    cfg.validate()
    if cfg.stage not in ("rda", "ida"):
        raise ConfigError(f"train_diffusion called with stage {cfg.stage!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    decomposer = ckpt.load_decomposer(tdn_checkpoint)
    for p in decomposer.parameters():
        p.requires_grad_(False)

    samples = load_training_data(cfg)
    schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    torch.set_flush_denormal(True)
    denoiser = UNetDenoiser(cfg.denoiser)
    consistency = build_refiner(cfg.consistency)
    params = list(denoiser.parameters()) + list(consistency.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    noise_gen = torch.Generator().manual_seed(cfg.seed)

    # When every sample already has patch size, decompose the corpus once.
    fixed_size = all(s.low.shape[:2] == (cfg.patch_size, cfg.patch_size) for s in samples)
    cond_cache = target_cache = None
    if fixed_size:
        lows = _to_bchw(np.stack([s.low for s in samples]))
        normals = _to_bchw(np.stack([s.normal for s in samples]))
        cond_cache = _decompose_maps(decomposer, lows, cfg.stage) * 2.0 - 1.0
        target_cache = _decompose_maps(decomposer, normals, cfg.stage) * 2.0 - 1.0

    trace = []
    for it in range(1, cfg.iterations + 1):
        if fixed_size:
            idx = rng.integers(0, len(samples), size=cfg.batch_size)
            cond = cond_cache[idx]
            x0 = target_cache[idx]
        else:
            low, normal = _sample_batch(samples, cfg.batch_size, cfg.patch_size, rng)
            cond = _decompose_maps(decomposer, low, cfg.stage) * 2.0 - 1.0
            x0 = _decompose_maps(decomposer, normal, cfg.stage) * 2.0 - 1.0

        t = torch.from_numpy(draw_timesteps(rng, schedule.T, cfg.batch_size))
        eps = torch.randn(x0.shape, generator=noise_gen)
        x_t = q_sample_batch(x0, t, eps, schedule)
        eps_hat = denoiser(x_t, cond, t)
        l_diff = diffusion_loss(eps, eps_hat)
        if cfg.gamma_ct:
            x0_est = estimate_x0_batch(x_t, eps_hat, t, schedule, clamp=True)
            refined = consistency(x0_est, t)
            l_content = content_loss(x0, refined)
            total = l_diff + cfg.gamma_ct * l_content
        else:
            l_content = torch.zeros(())
            total = l_diff

        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        row = {
            "iteration": it,
            "diffusion": float(l_diff),
            "content": float(l_content),
            "total": float(total),
        }
        _check_finite(row["total"], it, row)
        trace.append(row)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            ckpt.save_diffusion_stage(
                out_dir / f"{cfg.stage}_{it:06d}.ckpt", cfg.stage, denoiser, consistency, schedule
            )

    ckpt_path = out_dir / f"{cfg.stage}.ckpt"
    ckpt.save_diffusion_stage(
        ckpt_path, cfg.stage, denoiser, consistency, schedule,
        extra={"iterations": cfg.iterations, "seed": cfg.seed},
    )
    trace_path = out_dir / f"trace_{cfg.stage}.csv"
    _write_trace(trace_path, trace)
    return TrainResult(ckpt_path, trace_path, trace)
