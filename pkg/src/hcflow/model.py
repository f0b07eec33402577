"""Hierarchical conditional flow: x <-> (y, z_1..z_L).

Forward: each level squeezes (or Haar-transforms), runs K flow-steps and
splits into a kept part ``y_l`` and a factored-out part ``a_l``. Once the LR
image ``y_L`` exists, conditional features are computed coarse to fine and
every ``a_l`` passes through its own P-step conditional flow, ``a_L`` first.
The inverse runs level by level from L down to 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .conditioner import Conv, ResidualConditioner
from .errors import ConfigError, ShapeError
from .flow_layers import (ActNorm, FlowSequence, FlowStepOutput, HaarSqueeze,
                          InvConv1x1, Squeeze, split)

CONDITIONING_MODES = ("hierarchical", "same_level", "none")
SQUEEZE_KINDS = ("plain_squeeze", "haar")
CONV_INITS = ("orthogonal", "identity")


@dataclass
class HCFlowConfig:
    """Architecture description.

    ``levels`` L, ``flow_steps`` K per level and ``cond_flow_steps`` P per
    conditional flow. The scale factor is ``2 ** levels``.
    """

    levels: int = 2
    flow_steps: int = 4
    cond_flow_steps: int = 4
    conditioning: str = "hierarchical"
    squeeze: str = "plain_squeeze"
    use_1x1_conv: bool = True
    conv_init: str = "orthogonal"
    cond_width: int = 16
    cond_blocks: int = 2
    coupling_hidden: int = 32
    lr_sigma: float = 0.02
    in_channels: int = 3
    lr_channels: int = 3

    def __post_init__(self):
        self.validate()

    @property
    def scale_factor(self) -> int:
        return 2 ** self.levels

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.flow_steps < 1 or self.cond_flow_steps < 1:
            raise ConfigError("flow_steps and cond_flow_steps must be >= 1")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.squeeze not in SQUEEZE_KINDS:
            raise ConfigError(f"squeeze must be one of {SQUEEZE_KINDS}")
        if self.conv_init not in CONV_INITS:
            raise ConfigError(f"conv_init must be one of {CONV_INITS}")
        if not self.lr_sigma > 0:
            raise ConfigError(f"lr_sigma must be positive, got {self.lr_sigma}")
        if self.cond_width < 1 or self.cond_blocks < 0 or self.coupling_hidden < 1:
            raise ConfigError("conditioner sizes must be positive")

    @classmethod
    def rescaling(cls, **overrides) -> "HCFlowConfig":
        """Haar squeeze and no 1x1 convolutions."""
        base = dict(squeeze="haar", use_1x1_conv=False)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LatentDecomposition:
    y: torch.Tensor
    z: list[torch.Tensor]
    logdet: torch.Tensor
    y_levels: list[torch.Tensor] = field(default_factory=list)


def level_channels(cfg: HCFlowConfig) -> list[tuple[int, int, int]]:
    """Per level: (channels after squeeze, kept channels, factored-out channels)."""
    out = []
    c = cfg.in_channels
    for lvl in range(cfg.levels):
        c4 = 4 * c
        keep = cfg.lr_channels if lvl == cfg.levels - 1 else c4 // 2
        if not 0 < keep < c4:
            raise ConfigError(f"level {lvl + 1}: cannot keep {keep} of {c4} channels")
        out.append((c4, keep, c4 - keep))
        c = keep
    return out


class HCFlow(nn.Module):
    """The full bijection. Parameters are initialised from ``seed``."""

    def __init__(self, config: HCFlowConfig, seed: int = 0):
        super().__init__()
        self.config = config
        cfg = config
        self.chans = level_channels(cfg)
        squeeze_cls = HaarSqueeze if cfg.squeeze == "haar" else Squeeze
        self.squeezes = nn.ModuleList(squeeze_cls() for _ in range(cfg.levels))
        self.levels = nn.ModuleList(
            FlowSequence(c4, cfg.flow_steps, 0, cfg.coupling_hidden, cfg.use_1x1_conv)
            for c4, _, _ in self.chans)
        cond_ch = 0 if cfg.conditioning == "none" else cfg.cond_width
        self.cond_flows = nn.ModuleList(
            FlowSequence(a, cfg.cond_flow_steps, cond_ch, cfg.coupling_hidden, cfg.use_1x1_conv)
            for _, _, a in self.chans)
        if cfg.conditioning == "none":
            self.extractors = nn.ModuleList()
        else:
            ext = []
            for lvl, (_, keep, _) in enumerate(self.chans):
                coarser = cfg.levels - 1 - lvl
                in_ch = keep + (coarser * cfg.cond_width if cfg.conditioning == "hierarchical" else 0)
                ext.append(ResidualConditioner(in_ch, cfg.cond_width, cfg.cond_blocks))
            self.extractors = nn.ModuleList(ext)
        init_parameters(self, seed)

    # -- shapes -------------------------------------------------------------

    def latent_shapes(self, lr_shape) -> list[tuple[int, int, int, int]]:
        """Shapes of z_1..z_L for an LR tensor of shape ``lr_shape``."""
        b, _, h, w = lr_shape
        L = self.config.levels
        return [(b, a, h * 2 ** (L - 1 - lvl), w * 2 ** (L - 1 - lvl))
                for lvl, (_, _, a) in enumerate(self.chans)]

    def _check_hr(self, x):
        nx.check4(x, "forward_decompose")
        f = self.config.scale_factor
        if x.shape[1] != self.config.in_channels:
            raise ShapeError("forward_decompose", "channels", self.config.in_channels, x.shape[1])
        for i, name in ((2, "height"), (3, "width")):
            if x.shape[i] % f:
                raise ShapeError("forward_decompose", name, f"divisible by {f}", x.shape[i])

    # -- conditioning ---------------------------------------------------------

    def level_feature(self, lvl: int, y_l: torch.Tensor, coarser: list[torch.Tensor]):
        """Conditional feature for 0-based level ``lvl``.

        ``coarser`` holds the already computed features of levels
        ``lvl+1 .. L-1`` (any order is fine; they are sorted coarse first).
        """
        mode = self.config.conditioning
        if mode == "none":
            return None
        if mode == "same_level" or not coarser:
            return self.extractors[lvl](y_l)
        parts = []
        for c in coarser:
            up = c
            while up.shape[2] < y_l.shape[2]:
                up = nx.nearest_upsample_x2(up)
            if up.shape[2:] != y_l.shape[2:]:
                raise ShapeError("conditional_features", "resolution",
                                 tuple(y_l.shape[2:]), tuple(up.shape[2:]))
            parts.append(up)
        return self.extractors[lvl](nx.channel_concat(*parts, y_l))

    def conditional_features(self, y_levels: list[torch.Tensor]) -> list[torch.Tensor | None]:
        """Features c_1..c_L from y_1..y_L, computed from c_L down to c_1."""
        L = self.config.levels
        feats: list = [None] * L
        for lvl in reversed(range(L)):
            coarser = [feats[j] for j in range(L - 1, lvl, -1)]
            feats[lvl] = self.level_feature(lvl, y_levels[lvl], coarser)
        return feats

    # -- directions -----------------------------------------------------------

    def forward_decompose(self, x: torch.Tensor) -> LatentDecomposition:
        self._check_hr(x)
        logdet = x.new_zeros(x.shape[0])
        h = x
        ys, a_s = [], []
        for lvl, (_, keep, _) in enumerate(self.chans):
            h, ld = self.squeezes[lvl](h)
            logdet = logdet + ld
            h, ld = self.levels[lvl](h)
            logdet = logdet + ld
            y_l, a_l = split(h, keep)
            ys.append(y_l)
            a_s.append(a_l)
            h = y_l
        feats = self.conditional_features(ys)
        zs: list = [None] * len(a_s)
        for lvl in reversed(range(len(a_s))):
            zs[lvl], ld = self.cond_flows[lvl](a_s[lvl], feats[lvl])
            logdet = logdet + ld
        return LatentDecomposition(y=ys[-1], z=zs, logdet=logdet, y_levels=ys)

    def forward(self, x):
        return self.forward_decompose(x)

    def inverse_generate(self, y_star: torch.Tensor, z: list[torch.Tensor]) -> torch.Tensor:
        nx.check4(y_star, "inverse_generate")
        if y_star.shape[1] != self.config.lr_channels:
            raise ShapeError("inverse_generate", "LR channels", self.config.lr_channels, y_star.shape[1])
        L = self.config.levels
        if len(z) != L:
            raise ShapeError("inverse_generate", "latent count", L, len(z))
        expected = self.latent_shapes(y_star.shape)
        for lvl, (zl, shp) in enumerate(zip(z, expected)):
            if tuple(zl.shape) != shp:
                raise ShapeError("inverse_generate", f"z_{lvl + 1} shape", shp, tuple(zl.shape))
        h = y_star
        feats: list = [None] * L
        for lvl in reversed(range(L)):
            coarser = [feats[j] for j in range(L - 1, lvl, -1)]
            feats[lvl] = self.level_feature(lvl, h, coarser)
            a_l, _ = self.cond_flows[lvl].inverse(z[lvl], feats[lvl])
            h = nx.channel_concat(h, a_l)
            h, _ = self.levels[lvl].inverse(h)
            h, _ = self.squeezes[lvl].inverse(h)
        return h

    # -- helpers --------------------------------------------------------------

    def actnorm_layers(self):
        return [m for m in self.modules() if isinstance(m, ActNorm)]

    @torch.no_grad()
    def data_init(self, x: torch.Tensor) -> None:
        """Data-dependent actnorm initialisation from one HR batch."""
        for m in self.actnorm_layers():
            m.request_init()
        self.forward_decompose(x)

    def named_parameter_list(self) -> list[tuple[str, nn.Parameter]]:
        return list(self.named_parameters())


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic parameter initialisation from a :class:`CounterRNG`.

    Convolutions get LeCun-normal weights and zero biases (zero-init heads
    stay zero); 1x1 convolutions are orthogonal or identity per config;
    actnorms start as the identity.
    """
    rng = nx.CounterRNG(seed)
    conv_init = getattr(getattr(model, "config", None), "conv_init", "orthogonal")
    with torch.no_grad():
        for name, m in model.named_modules():
            if isinstance(m, Conv):
                if m.zero_init:
                    m.weight.zero_()
                else:
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(rng.normal_tensor(m.weight.shape, 1.0 / math.sqrt(fan_in)))
                m.bias.zero_()
            elif isinstance(m, InvConv1x1):
                if conv_init == "identity":
                    m.weight.copy_(torch.eye(m.channels))
                else:
                    q, r = np.linalg.qr(rng.normal((m.channels, m.channels)))
                    q = q * np.sign(np.diag(r))
                    m.weight.copy_(torch.from_numpy(q).to(m.weight.dtype))
            elif isinstance(m, ActNorm):
                m.scale.fill_(1.0)
                m.bias.zero_()
