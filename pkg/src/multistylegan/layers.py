"""Equalized learning-rate layers and fixed resampling helpers shared by G and D."""

import math

import torch
import torch.nn.functional as F
from torch import nn

LRELU_SLOPE = 0.2
LRELU_GAIN = math.sqrt(2.0)


def lrelu(x: torch.Tensor) -> torch.Tensor:
    """Leaky ReLU (slope 0.2) followed by the sqrt(2) variance-preserving gain."""
    return F.leaky_relu(x, LRELU_SLOPE) * LRELU_GAIN


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    # Bilinear, align_corners=False: output pixel (i + 0.5) / 2 - 0.5 in input coordinates,
    # i.e. interior weights (0.75, 0.25) with edge replication at the border.
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x: torch.Tensor) -> torch.Tensor:
    # Bilinear 0.5x with align_corners=False samples exactly between 2x2 pixel groups,
    # which is the same as 2x2 average pooling.
    return F.avg_pool2d(x, 2)


class EqualLinear(nn.Module):
    """Fully connected layer with runtime He scaling (weights stored as N(0, 1))."""

    def __init__(self, in_features, out_features, bias=True, bias_init=0.0, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.scale = 1.0 / math.sqrt(in_features)
        self.activate = activate

    def effective_weight(self) -> torch.Tensor:
        return self.weight * self.scale

    def forward(self, x):
        out = F.linear(x, self.effective_weight(), self.bias)
        return lrelu(out) if self.activate else out

    def extra_repr(self):
        return f"in={self.weight.shape[1]}, out={self.weight.shape[0]}, activate={self.activate}"


class EqualConv2d(nn.Module):
    """Same-padded convolution with runtime He scaling."""

    def __init__(self, in_channels, out_channels, kernel_size, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)

    def extra_repr(self):
        o, i, k, _ = self.weight.shape
        return f"{i}, {o}, kernel_size={k}"
