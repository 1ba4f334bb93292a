"""Small volumetric encoder-decoder with per-scale expert token projection.

The encoder is a stack of strided 3x3x3 convolution stages with residual
blocks and a multi-head self-attention block at the bottleneck (applied
only when the bottleneck holds at most 64 voxels, to bound cost). The
decoder mirrors it with residual CNN blocks and skip connections; each
decoder scale acts as one expert.

Scale indexing: feature 1 is the coarsest, feature L the finest (full
patch resolution), so the finest expert needs no upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .core import ModelConfig
from .errors import ConfigError

MAX_ATTENTION_TOKENS = 64


@dataclass(frozen=True)
class FeaturePyramid:
    """Decoder features f_1 (coarsest) .. f_L (finest, patch resolution)."""

    features: tuple[torch.Tensor, ...]

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class ExpertTokens:
    """Uniform-shape vision tokens, one (C_tok, D, W, H) slab per expert."""

    tokens: torch.Tensor  # (L, C_tok, D, W, H)

    @property
    def num_experts(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class GlobalFeature:
    g: torch.Tensor  # (C_bottleneck,)


def check_patch_dims(patch_dims: tuple[int, int, int], L: int) -> None:
    """Patch dims must survive L-1 halvings with at least 2 voxels per axis."""
    div = 1 << (L - 1)
    for d in patch_dims:
        if d % div != 0 or d // div < 2:
            raise ConfigError(
                f"patch dims {patch_dims} unusable with L={L}: each axis must be "
                f"a multiple of {div} with quotient >= 2"
            )


def _norm(ch: int) -> nn.Module:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm1 = _norm(ch)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm2 = _norm(ch)

    def forward(self, x):
        h = F.gelu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.gelu(x + h)


class BottleneckAttention(nn.Module):
    """Single MHSA block over the flattened bottleneck voxels."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        while ch % heads != 0:
            heads -= 1
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.norm = nn.LayerNorm(ch)

    def forward(self, x):
        c = x.shape[0]
        seq = x.reshape(c, -1).transpose(0, 1).unsqueeze(0)  # (1, tokens, C)
        out, _ = self.attn(self.norm(seq), self.norm(seq), self.norm(seq), need_weights=False)
        return x + out.squeeze(0).transpose(0, 1).reshape(x.shape)


class Encoder(nn.Module):
    """Stem plus L-1 downsampling stages; stage s halves resolution s times."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.encoder_widths
        self.stem = nn.Sequential(nn.Conv3d(1, widths[0], 3, padding=1), _norm(widths[0]), nn.GELU())
        self.stem_block = ResBlock(widths[0])
        downs, blocks = [], []
        for s in range(1, cfg.L):
            downs.append(nn.Conv3d(widths[s - 1], widths[s], 3, stride=2, padding=1))
            blocks.append(ResBlock(widths[s]))
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)
        self.bottleneck_attn = BottleneckAttention(widths[-1])
        self.L = cfg.L

    def forward(self, patch: torch.Tensor) -> list[torch.Tensor]:
        """Return features finest-first: index s is at resolution patch / 2^s."""
        check_patch_dims(tuple(patch.shape[-3:]), self.L)
        x = self.stem_block(self.stem(patch.reshape(1, 1, *patch.shape[-3:])))
        feats = [x.squeeze(0)]
        for down, block in zip(self.downs, self.blocks):
            x = block(down(x))
            feats.append(x.squeeze(0))
        bott = feats[-1]
        if bott[0].numel() <= MAX_ATTENTION_TOKENS:
            feats[-1] = self.bottleneck_attn(bott)
        return feats


def global_feature(encoder_feats: list[torch.Tensor]) -> GlobalFeature:
    """Spatial global-average pooling of the bottleneck feature map."""
    return GlobalFeature(g=encoder_feats[-1].mean(dim=(1, 2, 3)))


class Decoder(nn.Module):
    """Residual CNN decoder emitting the expert pyramid, coarse to fine."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.encoder_widths
        self.bottom = ResBlock(widths[-1])
        ups, blocks = [], []
        # decoder level l (1-based) sits at encoder depth L-l
        for depth in range(cfg.L - 2, -1, -1):
            ups.append(nn.Conv3d(widths[depth + 1], widths[depth], 3, padding=1))
            blocks.append(ResBlock(widths[depth]))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, encoder_feats: list[torch.Tensor]) -> FeaturePyramid:
        x = self.bottom(encoder_feats[-1].unsqueeze(0))
        pyramid = [x.squeeze(0)]
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = encoder_feats[len(encoder_feats) - 2 - i]
            x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
            x = block(up(x) + skip.unsqueeze(0))
            pyramid.append(x.squeeze(0))
        pyr = FeaturePyramid(features=tuple(pyramid))
        _check_pyramid(pyr)
        return pyr


def _check_pyramid(pyr: FeaturePyramid) -> None:
    fine = pyr.features[-1].shape[-3:]
    for l, f in enumerate(pyr.features):
        scale = 1 << (len(pyr) - 1 - l)
        expect = tuple(d // scale for d in fine)
        if tuple(f.shape[-3:]) != expect:
            raise ConfigError(f"pyramid level {l + 1} has dims {tuple(f.shape[-3:])}, expected {expect}")


class ExpertProjector(nn.Module):
    """Per-scale two-layer per-voxel perceptron producing uniform tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.encoder_widths
        mlps = []
        for l in range(cfg.L):  # level l+1 has encoder width at depth L-1-l
            c_in = widths[cfg.L - 1 - l]
            mlps.append(
                nn.Sequential(
                    nn.Conv3d(c_in, cfg.C_tok, 1), nn.GELU(), nn.Conv3d(cfg.C_tok, cfg.C_tok, 1)
                )
            )
        self.mlps = nn.ModuleList(mlps)

    def forward(self, pyramid: FeaturePyramid) -> ExpertTokens:
        out_size = pyramid.features[-1].shape[-3:]
        toks = []
        for f, mlp in zip(pyramid.features, self.mlps):
            x = f.unsqueeze(0)
            if tuple(f.shape[-3:]) != tuple(out_size):
                x = F.interpolate(x, size=out_size, mode="trilinear", align_corners=False)
            toks.append(mlp(x).squeeze(0))
        return ExpertTokens(tokens=torch.stack(toks))
