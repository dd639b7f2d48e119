"""Trainable diffusion networks: the conditional noise predictor and the
x0-consistency refiners, all conditioned on a sinusoidal time embedding.

The noise predictor is a U-Net of residual blocks with self-attention at the
lowest resolution; its input is the noisy image concatenated channel-wise with
the conditioning map. The reflectance-path refiner stacks channel-attention
blocks with a per-block time affine; the illumination-path refiner reuses the
U-Net topology at half width. Both refiners are residual around their input, so
they start as the identity (final layers are zero-initialized).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .tdn import ChannelAttention, ChannelLayerNorm, SeparableFeedForward

SINUSOID_DIM = 128


def sinusoidal_time_embedding(t: torch.Tensor, dim: int = SINUSOID_DIM) -> torch.Tensor:
    """Map integer steps (B,) to (B, dim) sin/cos features over log-spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeMlp(nn.Module):
    """Two-layer projection of the sinusoidal embedding."""

    def __init__(self, out_dim: int, sinusoid_dim: int = SINUSOID_DIM):
        super().__init__()
        self.sinusoid_dim = sinusoid_dim
        self.net = nn.Sequential(
            nn.Linear(sinusoid_dim, out_dim),
            nn.SiLU(),
            nn.Linear(out_dim, out_dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_time_embedding(t, self.sinusoid_dim)
        return self.net(emb.to(self.net[0].weight.dtype))


@dataclass(frozen=True)
class DenoiserDescriptor:
    """Shape contract of the U-Net; every array shape follows from these fields."""

    target_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    groups: int = 8
    conditioned: bool = True

    def validate(self) -> None:
        if self.target_channels not in (1, 3):
            raise ConfigError(f"target_channels must be 1 or 3, got {self.target_channels}")
        if self.base_channels < 1 or self.blocks_per_level < 1 or not self.channel_mults:
            raise ConfigError(f"invalid descriptor: {self}")
        for m in self.channel_mults:
            if (self.base_channels * m) % self.groups:
                raise ConfigError(
                    f"width {self.base_channels * m} not divisible by {self.groups} norm groups"
                )

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def to_dict(self) -> dict:
        return {
            "target_channels": self.target_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "blocks_per_level": self.blocks_per_level,
            "groups": self.groups,
            "conditioned": self.conditioned,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserDescriptor":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv twice with an additive time projection between."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialSelfAttention(nn.Module):
    """Single-head dot-product attention over pixels, used at the lowest resolution."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return self.proj(out) + x


class UNetDenoiser(nn.Module):
    """Conditional noise predictor: eps_hat = net([x_t, condition], t)."""

    def __init__(self, descriptor: DenoiserDescriptor | None = None):
        super().__init__()
        d = descriptor or DenoiserDescriptor()
        d.validate()
        self.descriptor = d
        widths = [d.base_channels * m for m in d.channel_mults]
        in_ch = d.target_channels * (2 if d.conditioned else 1)

        self.time_mlp = TimeMlp(d.time_dim)
        self.embed = nn.Conv2d(in_ch, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for i, width in enumerate(widths):
            level = nn.ModuleList(
                ResidualBlock(ch if b == 0 else width, width, d.time_dim, d.groups)
                for b in range(d.blocks_per_level)
            )
            self.enc_blocks.append(level)
            ch = width
            if i + 1 < len(widths):
                self.downs.append(nn.Conv2d(width, widths[i + 1], 3, stride=2, padding=1))
                ch = widths[i + 1]

        deepest = widths[-1]
        self.mid_block1 = ResidualBlock(deepest, deepest, d.time_dim, d.groups)
        self.mid_attn = SpatialSelfAttention(deepest, d.groups)
        self.mid_block2 = ResidualBlock(deepest, deepest, d.time_dim, d.groups)

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(widths))):
            width = widths[i]
            level = nn.ModuleList(
                ResidualBlock(2 * width if b == 0 else width, width, d.time_dim, d.groups)
                for b in range(d.blocks_per_level)
            )
            self.dec_blocks.append(level)
            if i > 0:
                self.ups.append(nn.ConvTranspose2d(width, widths[i - 1], 2, stride=2))

        self.out_norm = nn.GroupNorm(d.groups, widths[0])
        self.out_conv = nn.Conv2d(widths[0], d.target_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _backbone(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(t)
        x = self.embed(x)
        skips = []
        for i, level in enumerate(self.enc_blocks):
            for block in level:
                x = block(x, temb)
            skips.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)
        x = self.mid_block1(x, temb)
        x = self.mid_attn(x)
        x = self.mid_block2(x, temb)
        for i, level in enumerate(self.dec_blocks):
            x = torch.cat([x, skips[-1 - i]], dim=1)
            for block in level:
                x = block(x, temb)
            if i < len(self.ups):
                x = self.ups[i](x)
        return self.out_conv(F.silu(self.out_norm(x)))

    def forward(self, x_t: torch.Tensor, condition: torch.Tensor | None, t) -> torch.Tensor:
        d = self.descriptor
        if x_t.shape[1] != d.target_channels:
            raise ConfigError(
                f"x_t has {x_t.shape[1]} channels, network targets {d.target_channels}"
            )
        if d.conditioned:
            if condition is None or condition.shape != x_t.shape:
                got = None if condition is None else tuple(condition.shape)
                raise ConfigError(f"condition must match x_t {tuple(x_t.shape)}, got {got}")
            x = torch.cat([x_t, condition], dim=1)
        else:
            x = x_t
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)
        return self._backbone(x, t)


def predict_noise(
    x_t: torch.Tensor, condition: torch.Tensor, t, model: UNetDenoiser
) -> torch.Tensor:
    """Predict the injected noise for a noisy map and its conditioning map."""
    return model(x_t, condition, t)


# --------------------------------------------------------------------------
# Consistency refiners
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyDescriptor:
    """Descriptor of the x0 refiner.

    ``kind`` is "channel_attention" (reflectance path) or "unet" (illumination
    path; reuses the denoiser topology at the stated width, unconditioned).
    """

    kind: str = "channel_attention"
    target_channels: int = 3
    width: int = 32
    blocks: int = 2
    heads: int = 4
    channel_mults: tuple[int, ...] = (1, 2, 4)
    groups: int = 8

    def validate(self) -> None:
        if self.kind not in ("channel_attention", "unet"):
            raise ConfigError(f"unknown consistency kind {self.kind!r}")
        if self.target_channels not in (1, 3):
            raise ConfigError(f"target_channels must be 1 or 3, got {self.target_channels}")
        if self.kind == "channel_attention" and self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def time_dim(self) -> int:
        return 4 * self.width

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_channels": self.target_channels,
            "width": self.width,
            "blocks": self.blocks,
            "heads": self.heads,
            "channel_mults": list(self.channel_mults),
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyDescriptor":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


class _TimeAffineBlock(nn.Module):
    """Channel-attention block with a per-block (scale, shift) time injection."""

    def __init__(self, channels: int, heads: int, time_dim: int):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.affine = nn.Linear(time_dim, 2 * channels)
        self.attn = ChannelAttention(channels, heads)
        self.ffn = SeparableFeedForward(channels)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.affine(temb)[:, :, None, None].chunk(2, dim=1)
        x = self.norm(x) * (1 + scale) + shift
        return self.ffn(self.attn(x))


class ChannelAttentionRefiner(nn.Module):
    """Reflectance-path refiner: residual stack of time-modulated attention blocks."""

    def __init__(self, descriptor: ConsistencyDescriptor):
        super().__init__()
        descriptor.validate()
        if descriptor.kind != "channel_attention":
            raise ConfigError(f"wrong descriptor kind {descriptor.kind!r}")
        self.descriptor = descriptor
        self.time_mlp = TimeMlp(descriptor.time_dim)
        self.embed = nn.Conv2d(descriptor.target_channels, descriptor.width, 3, padding=1)
        self.blocks = nn.ModuleList(
            _TimeAffineBlock(descriptor.width, descriptor.heads, descriptor.time_dim)
            for _ in range(descriptor.blocks)
        )
        self.out_conv = nn.Conv2d(descriptor.width, descriptor.target_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x0_est: torch.Tensor, t) -> torch.Tensor:
        if x0_est.shape[1] != self.descriptor.target_channels:
            raise ConfigError(
                f"expected {self.descriptor.target_channels} channels, got {x0_est.shape[1]}"
            )
        if not torch.is_tensor(t):
            t = torch.full((x0_est.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(t)
        h = self.embed(x0_est)
        for block in self.blocks:
            h = block(h, temb)
        return x0_est + self.out_conv(h)


class UNetRefiner(nn.Module):
    """Illumination-path refiner: unconditioned U-Net, residual around its input."""

    def __init__(self, descriptor: ConsistencyDescriptor):
        super().__init__()
        descriptor.validate()
        if descriptor.kind != "unet":
            raise ConfigError(f"wrong descriptor kind {descriptor.kind!r}")
        self.descriptor = descriptor
        self.core = UNetDenoiser(
            DenoiserDescriptor(
                target_channels=descriptor.target_channels,
                base_channels=descriptor.width,
                channel_mults=descriptor.channel_mults,
                blocks_per_level=descriptor.blocks,
                groups=descriptor.groups,
                conditioned=False,
            )
        )

    def forward(self, x0_est: torch.Tensor, t) -> torch.Tensor:
        return x0_est + self.core(x0_est, None, t)


def build_refiner(descriptor: ConsistencyDescriptor) -> nn.Module:
    return (
        ChannelAttentionRefiner(descriptor)
        if descriptor.kind == "channel_attention"
        else UNetRefiner(descriptor)
    )


def refine_x0(x0_est: torch.Tensor, t, model: nn.Module) -> torch.Tensor:
    """Refine a clamped x0 estimate toward consistent clean content."""
    out = model(x0_est, t)
    if out.shape != x0_est.shape:
        raise InputError(f"refiner changed shape {tuple(x0_est.shape)} -> {tuple(out.shape)}")
    return out
