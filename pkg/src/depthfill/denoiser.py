"""Conditional noise-prediction U-Net.

The conditioning map is concatenated with the noisy latent at the input
only; the chain step enters through a sinusoidal embedding projected
per block and added to features channel-wise.  All normalization is
group norm, so rows of a batch never interact and results are identical
whether samples run alone or stacked.  The output conv starts at zero,
making the untrained network predict exactly zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Linear, Module, ModuleList
from .rng import stream
from .tensor import Tensor


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    levels: int = 3          # number of halvings
    cond_channels: int = 32
    time_dim: int = 64
    norm_groups: int = 8

    def validate(self) -> None:
        if self.base_channels < 1 or self.levels < 1:
            raise ConfigError("base_channels and levels must be >= 1")
        if self.time_dim % 2:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding: [sin(t*w_i); cos(t*w_i)], w_i = 10000^(-i/half)."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    if t < 0:
        raise ConfigError(f"t must be >= 0, got {t}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class TimedBlock(Module):
    """conv -> norm -> +t -> act -> conv -> norm, residual, optional stride."""

    def __init__(self, cin: int, cout: int, stride: int, time_dim: int, groups: int, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng)
        self.norm1 = GroupNorm(min(groups, cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, rng=rng)
        self.norm2 = GroupNorm(min(groups, cout), cout)
        self.tproj = Linear(time_dim, cout, rng=rng)
        self.skip = Conv2d(cin, cout, 1, stride=stride, rng=rng) if (cin != cout or stride != 1) else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.norm1(self.conv1(x))
        bias = self.tproj(temb).reshape(1, h.shape[1], 1, 1).broadcast_to(h.shape)
        h = T.silu(h + bias)
        h = self.norm2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return T.silu(h + s)


class UpBlock(Module):
    """Transpose-conv upsample, concat the skip, then a timed conv block."""

    def __init__(self, cin: int, cout: int, time_dim: int, groups: int, rng):
        self.up = ConvTranspose2d(cin, cout, 2, stride=2, rng=rng)
        self.block = TimedBlock(2 * cout, cout, 1, time_dim, groups, rng)

    def forward(self, x: Tensor, skip: Tensor, temb: Tensor) -> Tensor:
        u = self.up(x)
        if u.shape[2:] != skip.shape[2:]:
            raise DimensionError(f"UpBlock: upsampled {u.shape} vs skip {skip.shape}")
        return self.block(T.concat([u, skip], axis=1), temb)


class Denoiser(Module):
    """predict_noise(z_t, t, cond) -> eps_hat with the shape of z_t."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = stream(seed, "denoiser-init")
        base = cfg.base_channels
        self.conv_in = Conv2d(1 + cfg.cond_channels, base, 3, padding=1, rng=rng)
        self.downs = ModuleList()
        ch = base
        for _ in range(cfg.levels):
            self.downs.append(TimedBlock(ch, 2 * ch, 2, cfg.time_dim, cfg.norm_groups, rng))
            ch *= 2
        self.mid = TimedBlock(ch, ch, 1, cfg.time_dim, cfg.norm_groups, rng)
        self.ups = ModuleList()
        for _ in range(cfg.levels):
            self.ups.append(UpBlock(ch, ch // 2, cfg.time_dim, cfg.norm_groups, rng))
            ch //= 2
        self.conv_out = Conv2d(base, 1, 3, padding=1, init="zero")

    def predict_noise(self, z_t: Tensor, t: int, cond: Tensor) -> Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != 1:
            raise DimensionError(f"predict_noise: z_t must be [N,1,H,W], got {z_t.shape}")
        n, _, h, w = z_t.shape
        div = 2 ** self.cfg.levels
        if h % div or w % div:
            raise ConfigError(f"latent dims {h}x{w} not divisible by {div}")
        if cond.ndim == 3:
            cond4 = cond.reshape(1, *cond.shape).broadcast_to((n, *cond.shape))
        elif cond.ndim == 4:
            cond4 = cond
        else:
            raise DimensionError(f"predict_noise: cond must be [C,H,W] or [N,C,H,W], got {cond.shape}")
        if cond4.shape[1] != self.cfg.cond_channels or cond4.shape[2:] != (h, w):
            raise DimensionError(
                f"predict_noise: cond {cond4.shape} does not match latent {z_t.shape} "
                f"and {self.cfg.cond_channels} channels")
        temb = Tensor(timestep_embedding(t, self.cfg.time_dim))
        x = self.conv_in(T.concat([z_t, cond4], axis=1))
        skips = []
        for down in self.downs:
            skips.append(x)
            x = down(x, temb)
        x = self.mid(x, temb)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip, temb)
        return self.conv_out(x)

    forward = predict_noise
