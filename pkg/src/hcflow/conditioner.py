"""Non-invertible networks: feature extractors and coupling heads.

Neither contributes a log-determinant term; they only produce inputs
(conditional features, scale and shift) for invertible layers.
"""

from __future__ import annotations

import torch
from torch import nn

from . import numerics as nx
from .errors import ShapeError


class Conv(nn.Module):
    """Size-preserving convolution routed through :func:`numerics.conv2d`."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 zero_init: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(
            torch.zeros(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        # zero_init layers stay at zero when parameters are (re)initialised
        self.zero_init = zero_init

    def forward(self, x):
        return nx.conv2d(x, self.weight, self.bias)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, res_scale: float = 0.2):
        super().__init__()
        self.conv1 = Conv(width, width)
        self.conv2 = Conv(width, width)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(nx.relu(self.conv1(x)))


class ResidualConditioner(nn.Module):
    """Feature extractor: input conv, residual blocks, output projection.

    A reduced stand-in for an RRDB trunk. Spatial size is preserved.

    Args:
        in_channels: Channels of the conditioning input.
        width: Channels of the produced features.
        n_blocks: Number of residual units.
    """

    def __init__(self, in_channels: int, width: int = 16, n_blocks: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.n_blocks = n_blocks
        self.conv_in = Conv(in_channels, width)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(n_blocks))
        self.conv_out = Conv(width, width)

    def forward(self, x):
        nx.check4(x, "extract_features")
        if x.shape[1] != self.in_channels:
            raise ShapeError("extract_features", "channels", self.in_channels, x.shape[1])
        h = self.conv_in(x)
        skip = h
        for block in self.blocks:
            h = block(h)
        return self.conv_out(nx.relu(h + skip))


def extract_features(phi: ResidualConditioner, x: torch.Tensor) -> torch.Tensor:
    return phi(x)


class CouplingHead(nn.Module):
    """conv3x3 -> relu -> conv1x1 -> relu -> conv3x3 (zero-initialised).

    Emits ``2 * out_channels`` maps, split into (scale_raw, shift). The zero
    final layer makes a fresh coupling the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv(in_channels, hidden, 3)
        self.conv2 = Conv(hidden, hidden, 1)
        self.conv3 = Conv(hidden, 2 * out_channels, 3, zero_init=True)

    def forward(self, x):
        nx.check4(x, "coupling_head")
        if x.shape[1] != self.in_channels:
            raise ShapeError("coupling_head", "channels", self.in_channels, x.shape[1])
        h = nx.relu(self.conv1(x))
        h = nx.relu(self.conv2(h))
        out = self.conv3(h)
        scale_raw, shift = nx.channel_split(out, self.out_channels)
        return scale_raw, shift
