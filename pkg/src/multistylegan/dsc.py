"""Dual-styled-convolutional (DSC) block.

One style vector, computed from the intermediate latent ``w`` by an affine
layer, modulates two independent convolution kernels: one for the brightfield
path and one for the fluorescence path. Each path then adds its own bias and
scaled noise before the activation.
"""

import math
from typing import NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .layers import EqualLinear, lrelu, upsample2x

DEMOD_EPS = 1e-8

NoiseSpec = Union[str, Tuple[torch.Tensor, torch.Tensor]]


class FeaturePair(NamedTuple):
    bf: torch.Tensor
    gfp: torch.Tensor


def style_from_latent(w: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map ``s = weight @ w + bias``.

    ``w`` is ``[latent]`` or ``[batch, latent]``; ``weight`` is ``[in_ch, latent]``.
    """
    if w.shape[-1] != weight.shape[1]:
        raise ValueError(f"latent has {w.shape[-1]} dims, style layer expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"style bias shape {tuple(bias.shape)} does not match {weight.shape[0]} channels")
    return F.linear(w, weight, bias)


def modulate_weights(theta: torch.Tensor, s: torch.Tensor, demodulate: bool, eps: float = DEMOD_EPS) -> torch.Tensor:
    """Scale input channels of ``theta`` by ``s`` and optionally renormalize each output channel.

    ``theta`` is ``[out, in, k, k]``. With ``s`` of shape ``[in]`` the result has
    the shape of ``theta``; with ``[batch, in]`` it gains a leading batch axis.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if s.shape[-1] != theta.shape[1]:
        raise ValueError(f"style has {s.shape[-1]} entries, kernel has {theta.shape[1]} input channels")
    if not (torch.isfinite(s).all() and torch.isfinite(theta).all()):
        raise FloatingPointError("non-finite style or kernel in modulate_weights")
    batched = s.dim() == 2
    s_ = s if batched else s.unsqueeze(0)
    wts = theta.unsqueeze(0) * s_[:, None, :, None, None]
    if demodulate:
        d = torch.rsqrt(wts.square().sum(dim=(2, 3, 4), keepdim=True) + eps)
        wts = wts * d
    return wts if batched else wts[0]


def modulated_conv2d(x, theta, s, demodulate, eps=DEMOD_EPS):
    """Per-sample modulated convolution, done as one grouped conv over the batch."""
    b, c, h, w = x.shape
    wts = modulate_weights(theta, s, demodulate, eps)
    o, k = wts.shape[1], wts.shape[-1]
    out = F.conv2d(x.reshape(1, b * c, h, w), wts.reshape(b * o, c, k, k), padding=k // 2, groups=b)
    return out.reshape(b, o, h, w)


class DSCBlock(nn.Module):
    """Parameters and forward pass of a single dual-styled-convolutional block.

    Main-path blocks use 3x3 kernels with demodulation, noise and activation.
    Output-mapping blocks use 1x1 kernels, no demodulation, and are linear
    (``activate=False, use_noise=False``).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        latent_dim: int,
        kernel_size: int = 3,
        upsample: bool = False,
        demodulate: bool = True,
        activate: bool = True,
        use_noise: bool = True,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.upsample = upsample
        self.demodulate = demodulate
        self.activate = activate
        self.use_noise = use_noise
        self.style = EqualLinear(latent_dim, in_channels, bias_init=1.0)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.theta_b = nn.Parameter(torch.randn(shape))
        self.theta_g = nn.Parameter(torch.randn(shape))
        self.bias_b = nn.Parameter(torch.zeros(out_channels))
        self.bias_g = nn.Parameter(torch.zeros(out_channels))
        self.noise_gain_b = nn.Parameter(torch.zeros(()))
        self.noise_gain_g = nn.Parameter(torch.zeros(()))
        self.weight_scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)

    def style_vector(self, w: torch.Tensor) -> torch.Tensor:
        return style_from_latent(w, self.style.effective_weight(), self.style.bias)

    def _noise(self, noise: NoiseSpec, shape, like: torch.Tensor, generator: Optional[torch.Generator]):
        b, _, h, w = shape
        if isinstance(noise, str):
            if noise == "zero":
                return None, None
            if noise == "fresh":
                nb = torch.randn((b, 1, h, w), generator=generator, dtype=like.dtype, device=like.device)
                ng = torch.randn((b, 1, h, w), generator=generator, dtype=like.dtype, device=like.device)
                return nb, ng
            raise ValueError(f"unknown noise mode {noise!r}")
        nb, ng = noise
        for n in (nb, ng):
            if n.dim() != 4 or n.shape[1] != 1 or n.shape[2:] != (h, w) or n.shape[0] not in (1, b):
                raise ValueError(f"noise map of shape {tuple(n.shape)} does not fit features {tuple(shape)}")
        return nb, ng

    def forward(
        self,
        feat_b: torch.Tensor,
        feat_g: torch.Tensor,
        w: torch.Tensor,
        noise: NoiseSpec = "fresh",
        generator: Optional[torch.Generator] = None,
    ) -> FeaturePair:
        if feat_b.shape != feat_g.shape:
            raise ValueError(f"domain features differ in shape: {tuple(feat_b.shape)} vs {tuple(feat_g.shape)}")
        if feat_b.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {feat_b.shape[1]}")
        if w.dim() == 1:
            w = w.unsqueeze(0).expand(feat_b.shape[0], -1)
        s = self.style_vector(w)
        if self.upsample:
            feat_b, feat_g = upsample2x(feat_b), upsample2x(feat_g)
        out_b = modulated_conv2d(feat_b, self.theta_b * self.weight_scale, s, self.demodulate)
        out_g = modulated_conv2d(feat_g, self.theta_g * self.weight_scale, s, self.demodulate)
        out_b = out_b + self.bias_b[None, :, None, None]
        out_g = out_g + self.bias_g[None, :, None, None]
        if self.use_noise:
            nb, ng = self._noise(noise, out_b.shape, out_b, generator)
            if nb is not None:
                out_b = out_b + self.noise_gain_b * nb
                out_g = out_g + self.noise_gain_g * ng
        if self.activate:
            out_b, out_g = lrelu(out_b), lrelu(out_g)
        return FeaturePair(out_b, out_g)

    def extra_repr(self):
        return (
            f"{self.in_channels}, {self.out_channels}, kernel={self.theta_b.shape[-1]}, "
            f"upsample={self.upsample}, demodulate={self.demodulate}"
        )
