"""Run configuration: a single JSON-serializable document per training stage."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .denoisers import ConsistencyDescriptor, DenoiserDescriptor
from .errors import ConfigError
from .tdn import DecomposerDescriptor, DecompositionLossWeights

CONFIG_VERSION = 1
STAGES = ("tdn", "rda", "ida")

SEED_ENV_VAR = "DIFFRETINEX_SEED"


def resolve_seed(explicit: int | None, config_seed: int | None = None) -> int:
    """Seed precedence: explicit flag, then config, then DIFFRETINEX_SEED, then 0."""
    if explicit is not None:
        return int(explicit)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return 0


@dataclass
class DataConfig:
    kind: str = "synthetic"          # "synthetic" | "dirs"
    low_dir: str | None = None
    normal_dir: str | None = None
    n_samples: int = 500
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        if self.kind == "dirs":
            if not self.low_dir or not self.normal_dir:
                raise ConfigError("data.kind='dirs' requires low_dir and normal_dir")
        elif self.kind == "synthetic":
            if self.n_samples < 1:
                raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
            self.synth.validate()
        else:
            raise ConfigError(f"unknown data kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n_samples": self.n_samples}
        if self.low_dir:
            d["low_dir"] = self.low_dir
        if self.normal_dir:
            d["normal_dir"] = self.normal_dir
        d["synth"] = {
            "patch_size": self.synth.patch_size,
            "illum_cells": self.synth.illum_cells,
            "texture_octaves": self.synth.texture_octaves,
            "gamma_range": list(self.synth.gamma_range),
            "gain_range": list(self.synth.gain_range),
            "sigma_range": list(self.synth.sigma_range),
            "seed": self.synth.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        synth_d = dict(d.get("synth", {}))
        for key in ("gamma_range", "gain_range", "sigma_range"):
            if key in synth_d:
                synth_d[key] = tuple(synth_d[key])
        return cls(
            kind=d.get("kind", "synthetic"),
            low_dir=d.get("low_dir"),
            normal_dir=d.get("normal_dir"),
            n_samples=d.get("n_samples", 500),
            synth=SynthConfig(**synth_d),
        )


@dataclass
class TrainConfig:
    stage: str = "tdn"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    # decomposition stage
    decomposer: DecomposerDescriptor = field(default_factory=DecomposerDescriptor)
    loss_weights: DecompositionLossWeights = field(default_factory=DecompositionLossWeights)
    # diffusion stages
    gamma_ct: float = 1.0
    schedule_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser: DenoiserDescriptor = field(default_factory=DenoiserDescriptor)
    consistency: ConsistencyDescriptor = field(default_factory=ConsistencyDescriptor)
    tdn_checkpoint: str | None = None
    # optimization
    learning_rate: float = 1e-4
    batch_size: int = 16
    iterations: int = 5000
    patch_size: int = 48
    checkpoint_every: int = 0        # 0 = final checkpoint only
    out_dir: str = "runs/latest"

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        self.data.validate()
        for name in ("learning_rate", "batch_size", "iterations", "patch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.stage == "tdn":
            self.decomposer.validate()
            self.loss_weights.validate()
            if self.patch_size % self.decomposer.downsample_factor:
                raise ConfigError(
                    f"patch_size {self.patch_size} must be a multiple of "
                    f"{self.decomposer.downsample_factor}"
                )
        else:
            if self.schedule_steps < 1 or not (0 < self.beta_start <= self.beta_end < 1):
                raise ConfigError("invalid schedule parameters")
            if self.gamma_ct < 0:
                raise ConfigError(f"gamma_ct must be >= 0, got {self.gamma_ct}")
            self.denoiser.validate()
            self.consistency.validate()
            target = 3 if self.stage == "rda" else 1
            if self.denoiser.target_channels != target:
                raise ConfigError(
                    f"stage {self.stage} needs denoiser target_channels={target}"
                )
            if self.consistency.target_channels != target:
                raise ConfigError(
                    f"stage {self.stage} needs consistency target_channels={target}"
                )

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "stage": self.stage,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "decomposer": self.decomposer.to_dict(),
            "loss_weights": {
                "gamma_rc": self.loss_weights.gamma_rc,
                "gamma_sm": self.loss_weights.gamma_sm,
                "alpha_rec": self.loss_weights.alpha_rec,
                "crs_weight": self.loss_weights.crs_weight,
                "smooth_c": self.loss_weights.smooth_c,
            },
            "gamma_ct": self.gamma_ct,
            "schedule_steps": self.schedule_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "denoiser": self.denoiser.to_dict(),
            "consistency": self.consistency.to_dict(),
            "tdn_checkpoint": self.tdn_checkpoint,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "patch_size": self.patch_size,
            "checkpoint_every": self.checkpoint_every,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} unsupported (expected {CONFIG_VERSION})")
        known = {
            "stage", "seed", "data", "decomposer", "loss_weights", "gamma_ct",
            "schedule_steps", "beta_start", "beta_end", "denoiser", "consistency",
            "tdn_checkpoint", "learning_rate", "batch_size", "iterations",
            "patch_size", "checkpoint_every", "out_dir",
        }
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls()
        for key in known:
            if key not in d:
                continue
            value = d[key]
            if key == "data":
                value = DataConfig.from_dict(value)
            elif key == "decomposer":
                value = DecomposerDescriptor.from_dict(value)
            elif key == "loss_weights":
                value = DecompositionLossWeights(**value)
            elif key == "denoiser":
                value = DenoiserDescriptor.from_dict(value)
            elif key == "consistency":
                value = ConsistencyDescriptor.from_dict(value)
            setattr(cfg, key, value)
        return cfg

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        return cls.from_dict(d)


def _stage_descriptors(stage: str, base_channels: int) -> tuple[DenoiserDescriptor, ConsistencyDescriptor]:
    target = 3 if stage == "rda" else 1
    denoiser = DenoiserDescriptor(target_channels=target, base_channels=base_channels)
    if stage == "rda":
        consistency = ConsistencyDescriptor(
            kind="channel_attention", target_channels=3, width=base_channels, blocks=2,
            heads=4,
        )
    else:
        # Illumination path refiner mirrors the denoiser at half width.
        consistency = ConsistencyDescriptor(
            kind="unet", target_channels=1, width=max(base_channels // 2, 8),
            blocks=2, channel_mults=(1, 2, 4), groups=8,
        )
    return denoiser, consistency


def desk_config(stage: str, out_dir: str = "runs/desk") -> TrainConfig:
    """Default profile sized to train on a single workstation."""
    cfg = TrainConfig(stage=stage, out_dir=f"{out_dir}/{stage}")
    cfg.data = DataConfig(kind="synthetic", n_samples=500, synth=SynthConfig(patch_size=48))
    if stage == "tdn":
        cfg.iterations = 5000
        cfg.patch_size = 48
        cfg.batch_size = 16
    elif stage in ("rda", "ida"):
        cfg.denoiser, cfg.consistency = _stage_descriptors(stage, base_channels=32)
        cfg.schedule_steps = 100
        cfg.iterations = 10000
        cfg.batch_size = 8
        cfg.patch_size = 48
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return cfg


def paper_config(stage: str, out_dir: str = "runs/paper") -> TrainConfig:
    """Published-scale profile (long-running; not validated at desk scale)."""
    cfg = desk_config(stage, out_dir=out_dir)
    cfg.patch_size = 160
    cfg.batch_size = 16
    if stage == "tdn":
        cfg.decomposer = DecomposerDescriptor(embed_channels=48)
        cfg.iterations = 100_000
    else:
        cfg.denoiser, cfg.consistency = _stage_descriptors(stage, base_channels=64)
        cfg.schedule_steps = 1000
        cfg.iterations = 800_000
    return cfg
