"""Building blocks: equalized layers, modulated 1x1 convolutions, resampling."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0, lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    """Conv2d with runtime weight scaling."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class ModulatedConv1x1(nn.Module):
    """1x1 convolution whose weights are modulated per-sample by a style vector.

    The style vector is mapped through an affine layer to per-input-channel
    multipliers; weights are then demodulated so output feature magnitudes
    stay controlled. With a 1x1 kernel the whole operation reduces to matrix
    products, which is much cheaper than grouped convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, style_dim: int, demodulate: bool = True, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels))
        self.affine = EqualizedLinear(style_dim, in_channels, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_channels)
        self.demodulate = demodulate
        self.eps = eps
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        s = self.affine(style)  # (B, Cin)
        weight = self.weight * self.scale  # (Cout, Cin)
        # Per-sample modulated weight: W_b[j, i] = W[j, i] * s_b[i]
        wmod = weight.unsqueeze(0) * s.unsqueeze(1)  # (B, Cout, Cin)
        if self.demodulate:
            d = torch.rsqrt(wmod.pow(2).sum(dim=2, keepdim=True) + self.eps)
            wmod = wmod * d
        y = torch.bmm(wmod, x.reshape(b, c, h * w))
        return y.reshape(b, self.out_channels, h, w)


class ModulatedConv2d(nn.Module):
    """General modulated convolution (grouped-conv formulation), any kernel."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        style_dim: int,
        demodulate: bool = True,
        eps: float = 1e-8,
    ):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.affine = EqualizedLinear(style_dim, in_channels, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = (kernel_size - 1) // 2
        self.demodulate = demodulate
        self.eps = eps
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        s = self.affine(style)
        weight = (self.weight * self.scale).unsqueeze(0) * s[:, None, :, None, None]
        if self.demodulate:
            d = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
            weight = weight * d
        weight = weight.reshape(b * self.out_channels, c, *self.weight.shape[2:])
        y = F.conv2d(x.reshape(1, b * c, h, w), weight, padding=self.padding, groups=b)
        return y.reshape(b, self.out_channels, h, w)


def minibatch_stddev(feats: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Append one channel holding the mean per-feature batch stddev.

    Computed over the whole batch; a batch of identical samples (or N=1)
    yields an all-zero channel.
    """
    n, _, h, w = feats.shape
    if n > 1:
        std = torch.sqrt(feats.var(dim=0, unbiased=False) + eps).mean()
    else:
        std = feats.new_zeros(())
    channel = std.expand(n, 1, h, w)
    return torch.cat([feats, channel], dim=1)


class MiniBatchStdDev(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return minibatch_stddev(x)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, kernel_size=2)


class ResidualUpBlock(nn.Module):
    """2x upsampling residual block used by the rendering generator."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = EqualizedConv2d(out_channels, out_channels, 3, padding=1)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = upsample2x(x)
        y = self.act(self.conv1(x))
        y = self.act(self.conv2(y))
        return (y + self.skip(x)) / math.sqrt(2)


class ResidualDownBlock(nn.Module):
    """2x downsampling residual block used by the discriminator branches."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = EqualizedConv2d(in_channels, out_channels, 3, padding=1)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.conv1(x))
        y = downsample2x(self.act(self.conv2(y)))
        return (y + self.skip(downsample2x(x))) / math.sqrt(2)


def fourier_grid(resolution: int, freqs: int, dtype=torch.float32) -> torch.Tensor:
    """Deterministic sin/cos positional grid of shape (4*freqs, R, R).

    Uses geometric frequencies pi * 2^i per axis over coordinates in [-1, 1].
    """
    coords = torch.linspace(-1.0, 1.0, resolution, dtype=dtype)
    ys, xs = torch.meshgrid(coords, coords, indexing="ij")
    channels = []
    for i in range(freqs):
        f = math.pi * (2.0**i)
        channels.extend([torch.sin(f * xs), torch.cos(f * xs), torch.sin(f * ys), torch.cos(f * ys)])
    return torch.stack(channels, dim=0)
