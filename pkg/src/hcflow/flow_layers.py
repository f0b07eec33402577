"""Invertible layers with exact log-determinants.

Every layer exposes ``forward(h, cond=None)`` and ``inverse(h, cond=None)``,
each returning a :class:`FlowStepOutput`. ``logdet_delta`` is a per-item
tensor of shape (B,) in nats; the inverse direction reports the negated
value so that forward + inverse sums to zero.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .conditioner import CouplingHead
from .errors import ShapeError, SingularMatrixError

# s = sigmoid(r + 2) / sigmoid(2): bounded in (0, 1 / sigmoid(2)), exactly 1 at r = 0
SCALE_SHIFT = 2.0
_LOG_SIG_SHIFT = float(F.logsigmoid(torch.tensor(SCALE_SHIFT, dtype=torch.float64)))


class FlowStepOutput(NamedTuple):
    output: torch.Tensor
    logdet_delta: torch.Tensor


def _zeros_logdet(h):
    return h.new_zeros(h.shape[0])


def _check_even(h, op):
    nx.check4(h, op)
    if h.shape[2] % 2:
        raise ShapeError(op, "height", "even", h.shape[2])
    if h.shape[3] % 2:
        raise ShapeError(op, "width", "even", h.shape[3])


def _check_quad(h, op):
    nx.check4(h, op)
    if h.shape[1] % 4:
        raise ShapeError(op, "channels", "divisible by 4", h.shape[1])


class Squeeze(nn.Module):
    """Fold each 2x2 block into channels: (B,C,H,W) -> (B,4C,H/2,W/2).

    Output channel ``4c + 2i + j`` holds pixel (i, j) of each block of
    input channel ``c``.
    """

    def forward(self, h, cond=None):
        _check_even(h, "squeeze")
        b, c, hh, ww = h.shape
        out = h.reshape(b, c, hh // 2, 2, ww // 2, 2).permute(0, 1, 3, 5, 2, 4)
        return FlowStepOutput(out.reshape(b, 4 * c, hh // 2, ww // 2), _zeros_logdet(h))

    def inverse(self, h, cond=None):
        _check_quad(h, "squeeze.inverse")
        b, c4, hh, ww = h.shape
        c = c4 // 4
        out = h.reshape(b, c, 2, 2, hh, ww).permute(0, 1, 4, 2, 5, 3)
        return FlowStepOutput(out.reshape(b, c, 2 * hh, 2 * ww), _zeros_logdet(h))


class HaarSqueeze(nn.Module):
    """Orthonormal 2x2 Haar transform per channel.

    Output layout is ``[LL, HL, LH, HH]``, each band C channels wide, so the
    low-low band occupies the first C channels. The 4x4 transform matrix is
    symmetric and orthogonal, hence its own inverse and volume preserving.
    """

    @staticmethod
    def _butterfly(p, q, r, s):
        return (
            (p + q + r + s) * 0.5,
            (p - q + r - s) * 0.5,
            (p + q - r - s) * 0.5,
            (p - q - r + s) * 0.5,
        )

    def forward(self, h, cond=None):
        _check_even(h, "haar")
        a = h[:, :, 0::2, 0::2]
        b = h[:, :, 0::2, 1::2]
        c = h[:, :, 1::2, 0::2]
        d = h[:, :, 1::2, 1::2]
        return FlowStepOutput(torch.cat(self._butterfly(a, b, c, d), dim=1), _zeros_logdet(h))

    def inverse(self, h, cond=None):
        _check_quad(h, "haar.inverse")
        ll, hl, lh, hh = torch.chunk(h, 4, dim=1)
        a, b, c, d = self._butterfly(ll, hl, lh, hh)
        bsz, ch, hgt, wid = a.shape
        out = torch.stack([torch.stack([a, b], dim=-1), torch.stack([c, d], dim=-1)], dim=3)
        # out: (B, C, H, 2, W, 2) -> (B, C, 2H, 2W)
        return FlowStepOutput(out.reshape(bsz, ch, 2 * hgt, 2 * wid), _zeros_logdet(h))


class ActNorm(nn.Module):
    """Per-channel ``(h + bias) * scale`` with data-dependent initialisation.

    Starts as the identity. Call :meth:`initialize` with a batch (or run a
    forward pass after :meth:`request_init`) to set bias and scale so that the
    batch comes out with zero mean and unit standard deviation per channel.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self._init_pending = False

    def request_init(self):
        self._init_pending = True

    @torch.no_grad()
    def initialize(self, h):
        x = h.detach().to(torch.float64).transpose(0, 1).reshape(self.channels, -1)
        mean = x.mean(dim=1)
        std = x.std(dim=1, unbiased=False).clamp_min(1e-6)
        self.bias.copy_((-mean).reshape(1, -1, 1, 1).to(self.bias.dtype))
        self.scale.copy_((1.0 / std).reshape(1, -1, 1, 1).to(self.scale.dtype))
        self._init_pending = False

    def _check(self, h, op):
        nx.check4(h, op)
        if h.shape[1] != self.channels:
            raise ShapeError(op, "channels", self.channels, h.shape[1])
        if (self.scale.detach() == 0).any():
            raise ShapeError(op, "scale", "nonzero", "zero entry")

    def _logdet(self, h):
        return (h.shape[2] * h.shape[3]) * torch.log(self.scale.abs()).sum() * h.new_ones(h.shape[0])

    def forward(self, h, cond=None):
        if self._init_pending:
            self.initialize(h)
        self._check(h, "actnorm")
        return FlowStepOutput((h + self.bias) * self.scale, self._logdet(h))

    def inverse(self, h, cond=None):
        self._check(h, "actnorm.inverse")
        return FlowStepOutput(h / self.scale - self.bias, -self._logdet(h))


class InvConv1x1(nn.Module):
    """Channel mixing by a dense invertible matrix (stored directly)."""

    MIN_ABS_DET = 1e-12

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.weight = nn.Parameter(torch.eye(channels))

    def _check(self, h, op):
        nx.check4(h, op)
        if h.shape[1] != self.channels:
            raise ShapeError(op, "channels", self.channels, h.shape[1])

    def _logabsdet(self, op):
        sign, logabs = torch.linalg.slogdet(self.weight)
        if sign.item() == 0 or logabs.item() < torch.log(torch.tensor(self.MIN_ABS_DET)).item():
            raise SingularMatrixError(op, float(torch.exp(logabs).item()) if sign.item() else 0.0)
        return logabs

    def forward(self, h, cond=None):
        self._check(h, "invertible_1x1_conv")
        logabs = self._logabsdet("invertible_1x1_conv")
        out = torch.einsum("ij,bjhw->bihw", self.weight, h)
        return FlowStepOutput(out, h.shape[2] * h.shape[3] * logabs * h.new_ones(h.shape[0]))

    def inverse(self, h, cond=None):
        self._check(h, "invertible_1x1_conv.inverse")
        logabs = self._logabsdet("invertible_1x1_conv.inverse")
        w_inv = torch.linalg.inv(self.weight.to(torch.float64)).to(h.dtype)
        out = torch.einsum("ij,bjhw->bihw", w_inv, h)
        return FlowStepOutput(out, -h.shape[2] * h.shape[3] * logabs * h.new_ones(h.shape[0]))


class ChannelReverse(nn.Module):
    """Fixed channel reversal; stands in for the 1x1 convolution when disabled."""

    def forward(self, h, cond=None):
        return FlowStepOutput(h.flip(1), _zeros_logdet(h))

    def inverse(self, h, cond=None):
        return FlowStepOutput(h.flip(1), _zeros_logdet(h))


class AffineCoupling(nn.Module):
    """Affine coupling; conditional when ``cond_channels > 0``.

    The first ``C // 2`` channels pass through and, together with the
    optional conditioning tensor, parameterise scale and shift of the rest.

    Args:
        channels: Channels of the transformed tensor (>= 2).
        cond_channels: Channels of the external conditioning tensor, 0 for none.
        hidden: Width of the coupling head.
    """

    def __init__(self, channels: int, cond_channels: int = 0, hidden: int = 32):
        super().__init__()
        if channels < 2:
            raise ShapeError("affine_coupling", "channels", ">= 2", channels)
        self.channels = channels
        self.cond_channels = cond_channels
        self.n_pass = channels // 2
        self.n_trans = channels - self.n_pass
        self.head = CouplingHead(self.n_pass + cond_channels, self.n_trans, hidden)

    def _scale_shift(self, h_a, cond):
        if self.cond_channels:
            if cond is None:
                raise ShapeError("affine_coupling", "cond", "a conditioning tensor", None)
            nx.check4(cond, "affine_coupling")
            if cond.shape[1] != self.cond_channels:
                raise ShapeError("affine_coupling", "cond channels", self.cond_channels, cond.shape[1])
            if cond.shape[2:] != h_a.shape[2:]:
                raise ShapeError("affine_coupling", "cond spatial size",
                                 tuple(h_a.shape[2:]), tuple(cond.shape[2:]))
            inp = nx.channel_concat(h_a, cond)
        else:
            inp = h_a
        raw, shift = self.head(inp)
        if raw.shape[1] != self.n_trans:
            raise ShapeError("affine_coupling", "head output channels", self.n_trans, raw.shape[1])
        log_s = F.logsigmoid(raw + SCALE_SHIFT) - _LOG_SIG_SHIFT
        return log_s, shift

    def forward(self, h, cond=None):
        nx.check4(h, "affine_coupling")
        if h.shape[1] != self.channels:
            raise ShapeError("affine_coupling", "channels", self.channels, h.shape[1])
        h_a, h_b = nx.channel_split(h, self.n_pass)
        log_s, t = self._scale_shift(h_a, cond)
        out_b = h_b * torch.exp(log_s) + t
        return FlowStepOutput(torch.cat([h_a, out_b], dim=1), log_s.flatten(1).sum(1))

    def inverse(self, h, cond=None):
        nx.check4(h, "affine_coupling.inverse")
        if h.shape[1] != self.channels:
            raise ShapeError("affine_coupling.inverse", "channels", self.channels, h.shape[1])
        h_a, out_b = nx.channel_split(h, self.n_pass)
        log_s, t = self._scale_shift(h_a, cond)
        h_b = (out_b - t) * torch.exp(-log_s)
        return FlowStepOutput(torch.cat([h_a, h_b], dim=1), -log_s.flatten(1).sum(1))


def split(h: torch.Tensor, keep_channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Partition channels into (first ``keep_channels``, remainder)."""
    nx.check4(h, "split")
    if not 0 < keep_channels < h.shape[1]:
        raise ShapeError("split", "keep_channels", f"in (0, {h.shape[1]})", keep_channels)
    low, high = nx.channel_split(h, keep_channels)
    return low, high


class FlowStep(nn.Module):
    """Actnorm, channel mixing (1x1 conv or reversal), affine coupling."""

    def __init__(self, channels: int, cond_channels: int = 0, hidden: int = 32,
                 use_1x1_conv: bool = True):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.mix = InvConv1x1(channels) if use_1x1_conv else ChannelReverse()
        self.coupling = AffineCoupling(channels, cond_channels, hidden)

    def forward(self, h, cond=None):
        logdet = _zeros_logdet(h)
        for layer in (self.actnorm, self.mix, self.coupling):
            h, ld = layer(h, cond)
            logdet = logdet + ld
        return FlowStepOutput(h, logdet)

    def inverse(self, h, cond=None):
        logdet = _zeros_logdet(h)
        for layer in (self.coupling, self.mix, self.actnorm):
            h, ld = layer.inverse(h, cond)
            logdet = logdet + ld
        return FlowStepOutput(h, logdet)


class FlowSequence(nn.Module):
    """A stack of :class:`FlowStep` sharing one conditioning tensor."""

    def __init__(self, channels: int, n_steps: int, cond_channels: int = 0,
                 hidden: int = 32, use_1x1_conv: bool = True):
        super().__init__()
        self.steps = nn.ModuleList(
            FlowStep(channels, cond_channels, hidden, use_1x1_conv) for _ in range(n_steps))

    def forward(self, h, cond=None):
        logdet = _zeros_logdet(h)
        for step in self.steps:
            h, ld = step(h, cond)
            logdet = logdet + ld
        return FlowStepOutput(h, logdet)

    def inverse(self, h, cond=None):
        logdet = _zeros_logdet(h)
        for step in reversed(self.steps):
            h, ld = step.inverse(h, cond)
            logdet = logdet + ld
        return FlowStepOutput(h, logdet)
