"""Two-branch decomposition network (the "tdn" training stage) and its loss suite.

The reflectance branch is a three-stage transformer encoder/decoder built from
channel-direction attention blocks; the illumination branch is a small stack of
convolutions. Both read one shared embedding of the input image and end in a
sigmoid, so reflectance lands in [0, 1] and illumination in (0, 1).

Losses operate on torch tensors shaped (..., C, H, W); illumination maps have
one channel and broadcast over the three reflectance channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MIN_ILLUMINATION, RetinexDecomposition
from .errors import ConfigError, InputError

# Per-head depth-wise kernel sizes cycle through this tuple.
HEAD_KERNEL_SIZES = (3, 5, 7)


@dataclass(frozen=True)
class DecomposerDescriptor:
    """Architecture descriptor; every parameter shape follows from these fields."""

    embed_channels: int = 24
    stages: int = 3
    blocks_per_stage: int = 2
    heads: int = 3

    def validate(self) -> None:
        if self.embed_channels < 1 or self.stages < 1 or self.blocks_per_stage < 1 or self.heads < 1:
            raise ConfigError(f"descriptor fields must be positive: {self}")
        for i in range(self.stages):
            ch = self.embed_channels * 2**i
            if ch % self.heads:
                raise ConfigError(
                    f"stage {i} width {ch} not divisible by {self.heads} heads"
                )

    @property
    def downsample_factor(self) -> int:
        return 2**self.stages

    def to_dict(self) -> dict:
        return {
            "embed_channels": self.embed_channels,
            "stages": self.stages,
            "blocks_per_stage": self.blocks_per_stage,
            "heads": self.heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecomposerDescriptor":
        return cls(**d)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at each pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.layer_norm(x.permute(0, 2, 3, 1), self.weight.shape, self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)


class ChannelAttention(nn.Module):
    """Multi-head attention computed across channels, linear in pixel count.

    Query/key/value come from a point-wise projection followed by a depth-wise
    convolution whose kernel size differs per head (3/5/7 cycling through the
    heads). Each head forms a (c/heads x c/heads) attention matrix, so cost
    grows linearly with the number of pixels. Includes pre-normalization and
    the residual connection: with all projection weights zero this is an
    identity map.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.channels = channels
        self.heads = heads
        self.norm = ChannelLayerNorm(channels)
        # Output layout of the 1x1 projection is heads-major: [q_h | k_h | v_h] per head,
        # so one grouped depth-wise conv per head covers its q, k and v channels.
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        split = 3 * channels // heads
        self.dw = nn.ModuleList()
        for h in range(heads):
            k = HEAD_KERNEL_SIZES[h % len(HEAD_KERNEL_SIZES)]
            self.dw.append(nn.Conv2d(split, split, k, padding=k // 2, groups=split))
        self.project_out = nn.Conv2d(channels, channels, 1)

    def _qkv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        c_h = c // self.heads
        parts = torch.split(self.qkv(self.norm(x)), 3 * c_h, dim=1)
        qkv = torch.stack([conv(p) for conv, p in zip(self.dw, parts)], dim=1)
        return qkv.reshape(b, self.heads, 3, c_h, h * w).unbind(dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ConfigError(
                f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}"
            )
        b, c, h, w = x.shape
        c_h = c // self.heads
        q, k, v = self._qkv(x)
        attn = torch.softmax(q @ k.transpose(-2, -1) / c_h**0.5, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        return self.project_out(out) + x

    def attention_matrices(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head mixing matrices of shape (B, heads, c/heads, c/heads); diagnostic."""
        q, k, _ = self._qkv(x)
        return torch.softmax(q @ k.transpose(-2, -1) / (self.channels // self.heads) ** 0.5, dim=-1)


class SeparableFeedForward(nn.Module):
    """Depth-wise / point-wise feed-forward: dw -> pw -> GELU -> dw, plus residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.dw_in = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pw = nn.Conv2d(channels, channels, 1)
        self.dw_out = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        return self.dw_out(F.gelu(self.pw(self.dw_in(y)))) + x


class TransformerBlock(nn.Module):
    """Attention then feed-forward, each normalized and residual."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attn = ChannelAttention(channels, heads)
        self.ffn = SeparableFeedForward(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ffn(self.attn(x))


def _stage(channels: int, heads: int, blocks: int) -> nn.Sequential:
    return nn.Sequential(*[TransformerBlock(channels, heads) for _ in range(blocks)])


class DecomNet(nn.Module):
    """Decomposes an RGB image into a reflectance map and an illumination map."""

    def __init__(self, descriptor: DecomposerDescriptor | None = None):
        super().__init__()
        d = descriptor or DecomposerDescriptor()
        d.validate()
        self.descriptor = d
        c = d.embed_channels
        widths = [c * 2**i for i in range(d.stages)]

        self.embed = nn.Conv2d(3, c, 3, padding=1)

        self.encoder = nn.ModuleList(
            _stage(widths[i], d.heads, d.blocks_per_stage) for i in range(d.stages)
        )
        self.down = nn.ModuleList()
        for i in range(d.stages):
            out_ch = widths[i + 1] if i + 1 < d.stages else widths[-1]
            self.down.append(nn.Conv2d(widths[i], out_ch, 3, stride=2, padding=1))
        self.bottleneck = _stage(widths[-1], d.heads, d.blocks_per_stage)

        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(d.stages)):
            in_ch = widths[i + 1] if i + 1 < d.stages else widths[-1]
            self.up.append(nn.ConvTranspose2d(in_ch, widths[i], 2, stride=2))
            self.fuse.append(nn.Conv2d(2 * widths[i], widths[i], 1))
            self.decoder.append(_stage(widths[i], d.heads, d.blocks_per_stage))
        self.reflectance_out = nn.Conv2d(c, 3, 3, padding=1)

        self.illum_branch = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c, c, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c, 1, 3, padding=1),
        )

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) input, got {tuple(image.shape)}")
        factor = self.descriptor.downsample_factor
        if image.shape[-2] % factor or image.shape[-1] % factor:
            raise InputError(
                f"spatial dims {tuple(image.shape[-2:])} must be multiples of {factor}"
            )
        feat = self.embed(image)

        skips = []
        x = feat
        for stage, down in zip(self.encoder, self.down):
            x = stage(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, fuse, stage, skip in zip(self.up, self.fuse, self.decoder, reversed(skips)):
            x = up(x)
            x = fuse(torch.cat([x, skip], dim=1))
            x = stage(x)
        reflectance = torch.sigmoid(self.reflectance_out(x))

        illumination = torch.sigmoid(self.illum_branch(feat))
        return reflectance, illumination


def decompose(image: np.ndarray, model: DecomNet) -> RetinexDecomposition:
    """Decompose an (H, W, 3) image in [0, 1] into reflectance and illumination maps."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        r, l = model(x)
    r_np = r[0].permute(1, 2, 0).numpy()
    l_np = l[0].permute(1, 2, 0).clamp_min(MIN_ILLUMINATION).numpy()
    return RetinexDecomposition(reflectance=r_np, illumination=l_np)


# --------------------------------------------------------------------------
# Decomposition losses
# --------------------------------------------------------------------------


@dataclass
class DecompositionLossWeights:
    """Weights of the decomposition objective."""

    gamma_rc: float = 0.1
    gamma_sm: float = 0.1
    alpha_rec: float = 0.3
    crs_weight: float = 0.1
    smooth_c: float = 10.0

    def validate(self) -> None:
        for name in ("gamma_rc", "gamma_sm", "alpha_rec", "crs_weight", "smooth_c"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class DecompositionLossTerms:
    reconstruction: torch.Tensor
    reflectance_consistency: torch.Tensor
    illumination_smoothness: torch.Tensor
    total: torch.Tensor


def _check_same_shape(name_a: str, a: torch.Tensor, name_b: str, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InputError(f"{name_a} {tuple(a.shape)} vs {name_b} {tuple(b.shape)}")


def reconstruction_loss(
    r_low: torch.Tensor,
    l_low: torch.Tensor,
    r_normal: torch.Tensor,
    l_normal: torch.Tensor,
    i_low: torch.Tensor,
    i_normal: torch.Tensor,
    w: DecompositionLossWeights,
) -> torch.Tensor:
    """L1 fidelity of both reconstructions plus the symmetric cross-reconstruction term.

    The cross term swaps reflectances between exposure levels, enforcing their
    interchangeability: crs_weight * (|R_n*L_l - I_l| + |R_l*L_n - I_n|).
    """
    _check_same_shape("r_low", r_low, "i_low", i_low)
    _check_same_shape("r_normal", r_normal, "i_normal", i_normal)
    _check_same_shape("i_low", i_low, "i_normal", i_normal)
    loss = abs(r_normal * l_normal - i_normal).mean()
    loss = loss + w.alpha_rec * abs(r_low * l_low - i_low).mean()
    if w.crs_weight:
        crs = abs(r_normal * l_low - i_low).mean() + abs(r_low * l_normal - i_normal).mean()
        loss = loss + w.crs_weight * crs
    return loss


def reflectance_consistency_loss(r_low: torch.Tensor, r_normal: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between the two reflectance maps."""
    _check_same_shape("r_low", r_low, "r_normal", r_normal)
    return abs(r_normal - r_low).mean()


def _forward_diff(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """First differences along x and y with replicate boundary (zero at the far edge)."""
    dx = torch.diff(x, dim=-1, append=x[..., -1:])
    dy = torch.diff(x, dim=-2, append=x[..., -1:, :])
    return dx, dy


def _smoothness_term(l_map: torch.Tensor, guide: torch.Tensor, c: float) -> torch.Tensor:
    lum = guide.mean(dim=-3, keepdim=True)
    gx, gy = _forward_diff(lum)
    lx, ly = _forward_diff(l_map)
    return (torch.exp(-c * gx.abs()) * lx.abs() + torch.exp(-c * gy.abs()) * ly.abs()).mean()


def illumination_smoothness_loss(
    l_low: torch.Tensor,
    l_normal: torch.Tensor,
    i_low: torch.Tensor,
    i_normal: torch.Tensor,
    c: float = 10.0,
) -> torch.Tensor:
    """Edge-weighted total variation of both illumination maps.

    Gradients of the guidance image's luminance relax the penalty where the
    image itself is abrupt: weight exp(-c * |grad I|) multiplies |grad L|.
    """
    if l_low.shape[-3] != 1 or l_normal.shape[-3] != 1:
        raise InputError("illumination maps must have exactly 1 channel")
    return _smoothness_term(l_low, i_low, c) + _smoothness_term(l_normal, i_normal, c)


def total_decomposition_loss(
    r_low: torch.Tensor,
    l_low: torch.Tensor,
    r_normal: torch.Tensor,
    l_normal: torch.Tensor,
    i_low: torch.Tensor,
    i_normal: torch.Tensor,
    w: DecompositionLossWeights | None = None,
) -> DecompositionLossTerms:
    """Full decomposition objective: reconstruction + weighted consistency + smoothness."""
    w = w or DecompositionLossWeights()
    w.validate()
    rec = reconstruction_loss(r_low, l_low, r_normal, l_normal, i_low, i_normal, w)
    rc = reflectance_consistency_loss(r_low, r_normal)
    sm = illumination_smoothness_loss(l_low, l_normal, i_low, i_normal, w.smooth_c)
    total = rec + w.gamma_rc * rc + w.gamma_sm * sm
    return DecompositionLossTerms(
        reconstruction=rec,
        reflectance_consistency=rc,
        illumination_smoothness=sm,
        total=total,
    )
