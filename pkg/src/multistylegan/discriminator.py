"""U-Net discriminator with a global real/fake score and a per-pixel logit map."""

import math
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional

import torch
from torch import nn

from .layers import EqualConv2d, EqualLinear, downsample2x, lrelu, upsample2x


class DiscriminatorOutput(NamedTuple):
    scalar: torch.Tensor  # [batch]
    pixel_map: torch.Tensor  # [batch, 1, H, W]


@dataclass
class DiscriminatorConfig:
    encoder_features: List[int] = field(default_factory=lambda: [128, 256, 384, 768, 1024])
    decoder_features: List[int] = field(default_factory=lambda: [768, 384, 256, 128])
    input_channels: int = 6
    nonlocal_stages: List[int] = field(default_factory=lambda: [2, 3])

    def __post_init__(self):
        self.encoder_features = [int(f) for f in self.encoder_features]
        self.decoder_features = [int(f) for f in self.decoder_features]
        self.nonlocal_stages = sorted(int(i) for i in self.nonlocal_stages)
        if len(self.decoder_features) != len(self.encoder_features) - 1:
            raise ValueError("decoder must have exactly one block fewer than the encoder")
        if min(self.encoder_features + self.decoder_features + [self.input_channels]) <= 0:
            raise ValueError("feature counts must be positive")
        if any(not 0 <= i < len(self.encoder_features) for i in self.nonlocal_stages):
            raise ValueError(f"nonlocal_stages {self.nonlocal_stages} out of encoder range")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.encoder_features) - 1)

    def to_dict(self):
        return asdict(self)


def sequences_to_channels(bf: torch.Tensor, gfp: torch.Tensor) -> torch.Tensor:
    """Stack ``[B, T, H, W]`` domains as channels ``[BF t1..tT, GFP t1..tT]``."""
    return torch.cat([bf, gfp], dim=1)


class ResidualBlock(nn.Module):
    """``(skip(x) + conv_path(x)) / sqrt(2)``, optionally halving the resolution."""

    def __init__(self, in_channels, out_channels, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv0 = EqualConv2d(in_channels, in_channels, 3)
        self.conv1 = EqualConv2d(in_channels, out_channels, 3)
        self.skip = EqualConv2d(in_channels, out_channels, 1, bias=False)

    def conv_path(self, x):
        y = lrelu(self.conv0(x))
        if self.downsample:
            y = downsample2x(y)
        return lrelu(self.conv1(y))

    def forward(self, x):
        s = self.skip(downsample2x(x) if self.downsample else x)
        return (s + self.conv_path(x)) / math.sqrt(2.0)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian self-attention over spatial positions with a zero-initialized gate."""

    def __init__(self, channels):
        super().__init__()
        inner = max(1, channels // 8)
        value = max(1, channels // 2)
        self.query = EqualConv2d(channels, inner, 1, bias=False)
        self.key = EqualConv2d(channels, inner, 1, bias=False)
        self.value = EqualConv2d(channels, value, 1, bias=False)
        self.out = EqualConv2d(value, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))

    def attention_map(self, x):
        """Row-stochastic ``[B, N, N]`` map; row i weights every position for query i."""
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        return torch.softmax(torch.bmm(q.transpose(1, 2), k), dim=-1)

    def forward(self, x):
        b, c, h, w = x.shape
        attn = self.attention_map(x)
        v = self.value(x).flatten(2)
        y = torch.bmm(v, attn.transpose(1, 2)).reshape(b, -1, h, w)
        return x + self.gamma * self.out(y)


class UNetDiscriminator(nn.Module):
    """Residual encoder, scalar head on the mean-pooled bottleneck, and a skip-connected decoder.

    Encoder block 0 keeps the input resolution; every later block halves it,
    so inputs must be divisible by ``2 ** (len(encoder) - 1)``.
    """

    def __init__(self, config: Optional[DiscriminatorConfig] = None):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        enc = config.encoder_features
        self.encoder = nn.ModuleList()
        self.attention = nn.ModuleDict()
        prev = config.input_channels
        for i, f in enumerate(enc):
            self.encoder.append(ResidualBlock(prev, f, downsample=i > 0))
            if i in config.nonlocal_stages:
                self.attention[str(i)] = NonLocalBlock(f)
            prev = f
        self.scalar_head = EqualLinear(enc[-1], 1)
        self.decoder = nn.ModuleList()
        for j, f in enumerate(config.decoder_features):
            skip_ch = enc[-2 - j]
            self.decoder.append(ResidualBlock(prev + skip_ch, f))
            prev = f
        self.pixel_head = EqualConv2d(prev, 1, 1)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected [B, {self.config.input_channels}, H, W] input, got {tuple(x.shape)}")
        d = self.config.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ValueError(f"input size {tuple(x.shape[2:])} not divisible by {d}")
        skips = []
        h = x
        for i, block in enumerate(self.encoder):
            h = block(h)
            if str(i) in self.attention:
                h = self.attention[str(i)](h)
            skips.append(h)
        scalar = self.scalar_head(lrelu(h).mean(dim=(2, 3))).squeeze(1)
        for j, block in enumerate(self.decoder):
            h = block(torch.cat([upsample2x(h), skips[-2 - j]], dim=1))
        return DiscriminatorOutput(scalar, self.pixel_head(lrelu(h)))

    def discriminate(self, bf: torch.Tensor, gfp: torch.Tensor) -> DiscriminatorOutput:
        return self(sequences_to_channels(bf, gfp))
