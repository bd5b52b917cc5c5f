"""Guidance feature extraction from an RGB image and a sparse depth map.

Pipeline: a residual conv encoder produces an image feature pyramid
(channels doubling, resolution halving per level); the sparse depth and
its validity mask run through a small bottom-up/top-down pyramid into a
full-resolution depth feature map; deformable attention first enhances
the image features across scales (self pass), then lets depth-derived
queries pull from those enhanced maps (cross pass); the two results are
fused into one conditioning map at input resolution.

Everything here is per-scene (no batch axis in the public contract);
internally maps are carried as [1, C, H, W] so conv/norm primitives
apply unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DepthMap
from .diffusion import normalize_depth
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Module, ModuleList
from .rng import stream
from .tensor import Tensor


@dataclass
class GuidanceConfig:
    levels: int = 3
    image_base_channels: int = 16
    depth_channels: int = 32
    attn_width: int = 32          # query/value width inside deformable attention
    n_points: int = 4             # sampling points per level per query
    self_channels: int = 32       # full-res self-enhanced map width
    cross_channels: int = 32      # full-res cross-fused map width
    guidance_channels: int = 32   # conditioning map width
    norm_groups: int = 8
    d_max: float = 10.0

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        for name in ("image_base_channels", "depth_channels", "attn_width",
                     "n_points", "self_channels", "cross_channels", "guidance_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class GuidanceFeatures:
    """All intermediate and final guidance maps for one scene."""
    image_scales: list          # level l: Tensor [C*2^l, H/2^l, W/2^l]
    depth_scales: list          # bottom-up depth pyramid, same layout
    self_enhanced: Tensor       # [self_channels, H, W]
    cross_fused: Tensor         # [cross_channels, H, W]
    guidance: Tensor            # [guidance_channels, H, W]


class ResidualBlock(Module):
    """conv-norm-act twice with a (possibly strided/projected) skip."""

    def __init__(self, cin: int, cout: int, stride: int, groups: int, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng)
        self.norm1 = GroupNorm(min(groups, cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, rng=rng)
        self.norm2 = GroupNorm(min(groups, cout), cout)
        self.skip = Conv2d(cin, cout, 1, stride=stride, rng=rng) if (cin != cout or stride != 1) else None

    def forward(self, x: Tensor) -> Tensor:
        h = T.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return T.silu(h + s)


class ImageEncoder(Module):
    """Residual pyramid: level l has base*2^l channels at H/2^l x W/2^l."""

    def __init__(self, cfg: GuidanceConfig, rng):
        self.levels = cfg.levels
        self.blocks = ModuleList()
        cin = 3
        for l in range(cfg.levels):
            cout = cfg.image_base_channels * (2 ** l)
            self.blocks.append(ResidualBlock(cin, cout, stride=1 if l == 0 else 2,
                                             groups=cfg.norm_groups, rng=rng))
            cin = cout

    def forward(self, image: Tensor) -> list:
        if image.ndim != 4 or image.shape[0] != 1:
            raise DimensionError(f"ImageEncoder: expected [1,3,H,W], got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ConfigError(f"image dims {h}x{w} not divisible by {div}")
        feats = []
        x = image
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class DepthPyramid(Module):
    """Sparse depth + mask -> full-resolution depth feature map.

    Bottom-up strided blocks mirror the image pyramid; the top-down pass
    upsamples with learned transpose convs and merges through lateral
    1x1 convs, ending in a 3x3 conv at full resolution.
    """

    def __init__(self, cfg: GuidanceConfig, rng):
        self.levels = cfg.levels
        base = cfg.image_base_channels
        self.down = ModuleList()
        cin = 2  # [normalized depth, validity mask]
        for l in range(cfg.levels):
            cout = base * (2 ** l)
            self.down.append(ResidualBlock(cin, cout, stride=1 if l == 0 else 2,
                                           groups=cfg.norm_groups, rng=rng))
            cin = cout
        self.laterals = ModuleList(
            Conv2d(base * (2 ** l), cfg.depth_channels, 1, rng=rng) for l in range(cfg.levels))
        self.ups = ModuleList(
            ConvTranspose2d(cfg.depth_channels, cfg.depth_channels, 2, stride=2, rng=rng)
            for _ in range(cfg.levels - 1))
        self.out_conv = Conv2d(cfg.depth_channels, cfg.depth_channels, 3, padding=1, rng=rng)

    def forward(self, depth_mask: Tensor) -> tuple[Tensor, list]:
        if depth_mask.ndim != 4 or depth_mask.shape[1] != 2:
            raise DimensionError(f"DepthPyramid: expected [1,2,H,W], got {depth_mask.shape}")
        scales = []
        x = depth_mask
        for block in self.down:
            x = block(x)
            scales.append(x)
        top = self.laterals[self.levels - 1](scales[-1])
        for l in range(self.levels - 2, -1, -1):
            top = self.laterals[l](scales[l]) + self.ups[l](top)
        return self.out_conv(top), scales


class DeformableAttention(Module):
    """Single-head multi-scale deformable attention.

    Per query: a linear (1x1 conv) head predicts, for every (level,
    point) pair, a 2-D offset in that level's grid cells; another head
    predicts logits softmaxed jointly over all (level, point) pairs so
    the weights live on one simplex per query.  Values are sampled
    bilinearly (border-clamped) from per-level projected maps at the
    scale-aligned reference position plus offset.

    Offset and weight heads start at zero: sampling begins exactly on
    the aligned grid point with uniform attention.
    """

    def __init__(self, query_channels: int, value_channels: list[int],
                 width: int, n_points: int, out_channels: int, rng):
        self.n_levels = len(value_channels)
        self.n_points = n_points
        self.width = width
        self.offset_head = Conv2d(query_channels, self.n_levels * n_points * 2, 1, init="zero")
        self.weight_head = Conv2d(query_channels, self.n_levels * n_points, 1, init="zero")
        self.value_projs = ModuleList(Conv2d(c, width, 1, rng=rng) for c in value_channels)
        self.out_head = Conv2d(width, out_channels, 1, rng=rng)

    @staticmethod
    def reference_points(hq: int, wq: int, hl: int, wl: int) -> np.ndarray:
        """Query-grid pixel centers mapped into level-l pixel coordinates, [Q,2] as (x,y)."""
        qx, qy = np.meshgrid(np.arange(wq), np.arange(hq))
        nx = (qx.reshape(-1) + 0.5) / wq
        ny = (qy.reshape(-1) + 0.5) / hq
        return np.stack([nx * wl - 0.5, ny * hl - 0.5], axis=1)

    def forward(self, queries: Tensor, values: list) -> Tensor:
        if queries.ndim != 4 or queries.shape[0] != 1:
            raise DimensionError(f"DeformableAttention: queries must be [1,C,H,W], got {queries.shape}")
        if len(values) != self.n_levels:
            raise DimensionError(f"DeformableAttention: got {len(values)} value maps, expected {self.n_levels}")
        hq, wq = queries.shape[2], queries.shape[3]
        q = hq * wq
        p = self.n_points
        offsets = self.offset_head(queries)           # [1, L*P*2, Hq, Wq]
        logits = self.weight_head(queries)            # [1, L*P, Hq, Wq]
        attn = T.softmax(logits, axis=1)
        acc = None
        for l, value in enumerate(values):
            vp = self.value_projs[l](value)[0]        # [width, Hl, Wl]
            hl, wl = value.shape[2], value.shape[3]
            base = self.reference_points(hq, wq, hl, wl)           # [Q,2]
            base_tiled = np.broadcast_to(base[None], (p, q, 2)).reshape(p * q, 2)
            delta = offsets[0, 2 * l * p:2 * (l + 1) * p]          # [P*2, Hq, Wq]
            delta = delta.reshape(p, 2, q).transpose(0, 2, 1).reshape(p * q, 2)
            samples = T.bilinear_sample(vp, Tensor(base_tiled) + delta)     # [P*Q, width]
            a = attn[0, l * p:(l + 1) * p].reshape(p * q, 1).broadcast_to((p * q, self.width))
            contrib = (samples * a).reshape(p, q, self.width).sum(axis=0)   # [Q, width]
            acc = contrib if acc is None else acc + contrib
        out = acc.transpose(1, 0).reshape(1, self.width, hq, wq)
        return self.out_head(out)


class FpnAggregate(Module):
    """Collapse a feature pyramid to one full-resolution map."""

    def __init__(self, channels: list[int], out_channels: int, rng):
        self.levels = len(channels)
        self.laterals = ModuleList(Conv2d(c, out_channels, 1, rng=rng) for c in channels)
        self.ups = ModuleList(ConvTranspose2d(out_channels, out_channels, 2, stride=2, rng=rng)
                              for _ in range(self.levels - 1))
        self.out_conv = Conv2d(out_channels, out_channels, 3, padding=1, rng=rng)

    def forward(self, feats: list) -> Tensor:
        top = self.laterals[self.levels - 1](feats[-1])
        for l in range(self.levels - 2, -1, -1):
            top = self.laterals[l](feats[l]) + self.ups[l](top)
        return self.out_conv(top)


class GuidanceExtractor(Module):
    """image [3,H,W] + sparse depth -> conditioning map [C_g,H,W]."""

    def __init__(self, cfg: GuidanceConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = stream(seed, "guidance-init")
        level_channels = [cfg.image_base_channels * (2 ** l) for l in range(cfg.levels)]
        self.image_encoder = ImageEncoder(cfg, rng)
        self.depth_pyramid = DepthPyramid(cfg, rng)
        # self pass: per-level query adapters into one shared attention
        self.query_adapters = ModuleList(Conv2d(c, cfg.attn_width, 1, rng=rng) for c in level_channels)
        self.self_attn = DeformableAttention(cfg.attn_width, level_channels,
                                             cfg.attn_width, cfg.n_points, cfg.attn_width, rng)
        self.self_mix = ModuleList(Conv2d(cfg.attn_width + c, c, 1, rng=rng) for c in level_channels)
        self.self_fpn = FpnAggregate(level_channels, cfg.self_channels, rng)
        # cross pass: depth queries over the enhanced image pyramid
        self.cross_query = Conv2d(cfg.depth_channels, cfg.attn_width, 1, rng=rng)
        self.cross_attn = DeformableAttention(cfg.attn_width, level_channels,
                                              cfg.attn_width, cfg.n_points, cfg.attn_width, rng)
        self.cross_mix = Conv2d(cfg.attn_width + cfg.depth_channels, cfg.cross_channels, 1, rng=rng)
        # fusion: 1x1 merge plus a zero-init residual conv
        self.fuse_in = Conv2d(cfg.self_channels + cfg.cross_channels, cfg.guidance_channels, 1, rng=rng)
        self.fuse_res = Conv2d(cfg.guidance_channels, cfg.guidance_channels, 3, padding=1, init="zero")

    def self_enhance(self, image_scales: list) -> tuple[Tensor, list]:
        enhanced = []
        for l, feat in enumerate(image_scales):
            queries = self.query_adapters[l](feat)
            attended = self.self_attn(queries, image_scales)
            enhanced.append(self.self_mix[l](T.concat([attended, feat], axis=1)))
        return self.self_fpn(enhanced), enhanced

    def cross_fuse(self, depth_feat: Tensor, enhanced: list) -> Tensor:
        queries = self.cross_query(depth_feat)
        attended = self.cross_attn(queries, enhanced)
        return self.cross_mix(T.concat([attended, depth_feat], axis=1))

    def fuse(self, self_enhanced: Tensor, cross_fused: Tensor) -> Tensor:
        h = self.fuse_in(T.concat([self_enhanced, cross_fused], axis=1))
        return h + self.fuse_res(T.silu(h))

    def forward(self, image, sparse: DepthMap) -> GuidanceFeatures:
        img = image if isinstance(image, Tensor) else Tensor(image)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"extract: image must be [3,H,W], got {img.shape}")
        if (sparse.height, sparse.width) != (img.shape[1], img.shape[2]):
            raise DimensionError(
                f"extract: depth {sparse.height}x{sparse.width} vs image {img.shape[1]}x{img.shape[2]}")
        img4 = img.reshape(1, *img.shape)
        z = normalize_depth(sparse.meters, self.cfg.d_max) * sparse.valid
        dm = Tensor(np.stack([z, sparse.valid.astype(np.float64)])[None])
        image_scales = self.image_encoder(img4)
        depth_feat, depth_scales = self.depth_pyramid(dm)
        self_enhanced, enhanced = self.self_enhance(image_scales)
        cross_fused = self.cross_fuse(depth_feat, enhanced)
        guidance = self.fuse(self_enhanced, cross_fused)
        return GuidanceFeatures(
            image_scales=[f[0] for f in image_scales],
            depth_scales=[f[0] for f in depth_scales],
            self_enhanced=self_enhanced[0],
            cross_fused=cross_fused[0],
            guidance=guidance[0],
        )
