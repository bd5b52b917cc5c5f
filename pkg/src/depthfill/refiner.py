"""Iterative depth refinement by learned, offset-deformed propagation.

Each step rebuilds every pixel as a weighted sum of its k x k
neighborhood, where the k*k-1 non-center taps move by learned per-pixel
offsets (bilinear, border-clamped) and the center tap is always the
pixel itself.  Weights are sigmoid outputs used as-is; they are not a
convex combination unless the optional normalization flag is set.
After every step the map is pulled back toward the sparse measurements
with a learned per-pixel anchor strength.

The chain runs once per kernel size; snapshots at the first, middle and
last steps are blended by two softmax fields, one across kernels and
one across snapshot instants, so the final map is a convex mix of
intermediate states.  All propagation parameters are predicted once
from the guidance map and reused for every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DepthMap
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, Module, ModuleList
from .rng import stream
from .tensor import Tensor


@dataclass
class RefineConfig:
    kernels: tuple[int, ...] = (3, 5, 7)
    steps: int = 12
    normalize_weights: bool = False
    trunk_channels: int = 32
    norm_groups: int = 8

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.kernels:
            raise ConfigError("need at least one kernel size")
        for k in self.kernels:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 3, got {k}")

    @property
    def instants(self) -> tuple[int, ...]:
        """Snapshot steps: first, middle, last (deduplicated, ascending)."""
        return tuple(sorted({1, math.ceil(self.steps / 2), self.steps}))


@dataclass
class RefinementParams:
    """Per-pixel propagation fields, all at map resolution.

    offsets[k]: [2*(k*k-1), H, W]  (dx, dy) per non-center tap, row-major
    weights[k]: [k*k, H, W]        tap weights in (0,1), center included
    anchor[k]:  [H, W]             sparse anchoring strength in (0,1)
    kernel_mix:  [len(kernels), H, W]  softmax across kernels
    instant_mix: [len(instants), H, W] softmax across snapshot instants
    """

    offsets: dict
    weights: dict
    anchor: dict
    kernel_mix: Tensor
    instant_mix: Tensor


def _tap_layout(k: int) -> tuple[np.ndarray, int]:
    """Row-major (dx, dy) base displacements of a k x k window and the
    center's index within it."""
    r = k // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    taps = np.stack([dx.reshape(-1), dy.reshape(-1)], axis=1).astype(np.float64)
    return taps, (k * k) // 2


def propagate_step(depth: Tensor, offsets: Tensor, weights: Tensor, k: int,
                   normalize: bool = False) -> Tensor:
    """One propagation pass over a [H,W] depth tensor."""
    if depth.ndim != 2:
        raise DimensionError(f"propagate_step: depth must be [H,W], got {depth.shape}")
    h, w = depth.shape
    m = k * k - 1
    if offsets.shape != (2 * m, h, w):
        raise DimensionError(f"propagate_step: offsets {offsets.shape}, expected {(2*m, h, w)}")
    if weights.shape != (k * k, h, w):
        raise DimensionError(f"propagate_step: weights {weights.shape}, expected {(k*k, h, w)}")
    taps, center = _tap_layout(k)
    side_taps = np.delete(taps, center, axis=0)            # [M,2]
    q = h * w
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    grid = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)   # [Q,2]
    base = (grid[None] + side_taps[:, None]).reshape(m * q, 2)
    delta = offsets.reshape(m, 2, q).transpose(0, 2, 1).reshape(m * q, 2)
    samples = T.bilinear_sample(depth.reshape(1, h, w), Tensor(base) + delta)  # [M*Q, 1]
    side_vals = samples.reshape(m, q)
    side_w = T.concat([weights[:center], weights[center + 1:]], axis=0).reshape(m, q)
    out = (side_vals * side_w).sum(axis=0) + weights[center].reshape(q) * depth.reshape(q)
    if normalize:
        out = out * weights.sum(axis=0).reshape(q).reciprocal()
    return out.reshape(h, w)


def anchor_sparse(depth: Tensor, sparse: DepthMap, anchor: Tensor) -> Tensor:
    """Blend measured pixels back in: d <- (1 - a*m)*d + a*m*measured."""
    if depth.ndim != 2:
        raise DimensionError(f"anchor_sparse: depth must be [H,W], got {depth.shape}")
    if (sparse.height, sparse.width) != depth.shape:
        raise DimensionError(f"anchor_sparse: sparse {sparse.height}x{sparse.width} vs {depth.shape}")
    if anchor.shape != depth.shape:
        raise DimensionError(f"anchor_sparse: anchor {anchor.shape} vs depth {depth.shape}")
    gate = anchor * Tensor(sparse.valid.astype(np.float64))
    return depth * (1.0 - gate) + gate * Tensor(sparse.meters)


def refine_with_params(d0: Tensor, sparse: DepthMap, params: RefinementParams,
                       cfg: RefineConfig) -> Tensor:
    """Run every kernel chain and blend snapshots; returns meters [H,W]."""
    cfg.validate()
    instants = cfg.instants
    snapshots = []   # [kernel][instant] -> Tensor [H,W]
    for k in cfg.kernels:
        d = d0
        snaps = []
        for step in range(1, cfg.steps + 1):
            d = propagate_step(d, params.offsets[k], params.weights[k], k,
                               normalize=cfg.normalize_weights)
            d = anchor_sparse(d, sparse, params.anchor[k])
            if step in instants:
                snaps.append(d)
        snapshots.append(snaps)
    h, w = d0.shape
    out = None
    for ki in range(len(cfg.kernels)):
        for ti in range(len(instants)):
            term = snapshots[ki][ti] * params.kernel_mix[ki] * params.instant_mix[ti]
            out = term if out is None else out + term
    return out.relu()  # meters stay non-negative


class Refiner(Module):
    """Predicts propagation fields from the guidance map and applies them."""

    def __init__(self, cond_channels: int, cfg: RefineConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = stream(seed, "refiner-init")
        tc = cfg.trunk_channels
        self.trunk = Conv2d(cond_channels, tc, 3, padding=1, rng=rng)
        self.trunk_norm = GroupNorm(min(cfg.norm_groups, tc), tc)
        self.offset_heads = ModuleList(
            Conv2d(tc, 2 * (k * k - 1), 3, padding=1, init="zero") for k in cfg.kernels)
        self.weight_heads = ModuleList(
            Conv2d(tc, k * k, 3, padding=1, init="zero") for k in cfg.kernels)
        self.anchor_heads = ModuleList(
            Conv2d(tc, 1, 3, padding=1, init="zero") for _ in cfg.kernels)
        # start taps as an average (weights ~ 1/k^2) and trust measurements
        for head, k in zip(self.weight_heads, cfg.kernels):
            head.bias.data[:] = -math.log(k * k - 1.0)
        for head in self.anchor_heads:
            head.bias.data[:] = 2.0
        self.kernel_mix_head = Conv2d(tc, len(cfg.kernels), 3, padding=1, init="zero")
        self.instant_mix_head = Conv2d(tc, len(cfg.instants), 3, padding=1, init="zero")

    def predict_params(self, cond: Tensor) -> RefinementParams:
        if cond.ndim != 3:
            raise DimensionError(f"predict_params: cond must be [C,H,W], got {cond.shape}")
        f = T.silu(self.trunk_norm(self.trunk(cond.reshape(1, *cond.shape))))
        offsets, weights, anchors = {}, {}, {}
        for i, k in enumerate(self.cfg.kernels):
            offsets[k] = self.offset_heads[i](f)[0]
            weights[k] = T.sigmoid(self.weight_heads[i](f)[0])
            anchors[k] = T.sigmoid(self.anchor_heads[i](f)[0, 0])
        return RefinementParams(
            offsets=offsets, weights=weights, anchor=anchors,
            kernel_mix=T.softmax(self.kernel_mix_head(f)[0], axis=0),
            instant_mix=T.softmax(self.instant_mix_head(f)[0], axis=0),
        )

    def refine_tensor(self, d0: Tensor, cond: Tensor, sparse: DepthMap) -> Tensor:
        params = self.predict_params(cond)
        return refine_with_params(d0, sparse, params, self.cfg)

    def refine(self, d0: DepthMap, cond: Tensor, sparse: DepthMap) -> DepthMap:
        out = self.refine_tensor(Tensor(d0.meters), cond, sparse)
        return DepthMap.dense(out.data)

    forward = refine_tensor
