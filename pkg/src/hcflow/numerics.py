"""Tensor core: shape-checked ops, gradients, Adam and a seeded generator.

Tensors are ``torch.Tensor`` objects of rank 4 laid out as
(batch, channels, height, width) in float32. Every op here validates its
operands and raises :class:`~hcflow.errors.ShapeError` instead of relying on
broadcasting. Reverse-mode differentiation is torch autograd.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeError

DTYPE = torch.float32
_DIMS = ("batch", "channels", "height", "width")


def check4(t: torch.Tensor, op: str) -> torch.Tensor:
    if not isinstance(t, torch.Tensor):
        raise TypeError(f"{op}: expected a torch.Tensor, got {type(t).__name__}")
    if t.dim() != 4:
        raise ShapeError(op, "rank", 4, t.dim())
    return t


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what}: non-finite values")
    return t


def same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    check4(a, op)
    check4(b, op)
    for name, da, db in zip(_DIMS, a.shape, b.shape):
        if da != db:
            raise ShapeError(op, name, da, db)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           padding: int | None = None) -> torch.Tensor:
    """Zero-padded, size-preserving 2D convolution.

    Args:
        x: Input of shape (B, C_in, H, W).
        weight: Kernel of shape (C_out, C_in, kh, kw) with odd kh, kw.
        bias: Optional per-output-channel vector.
        padding: Must equal (kh - 1) / 2; inferred when omitted.
    """
    check4(x, "conv2d")
    if weight.dim() != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.dim())
    c_out, c_in, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel size", "odd", (kh, kw))
    if kh != kw:
        raise ShapeError("conv2d", "kernel size", "square", (kh, kw))
    if x.shape[1] != c_in:
        raise ShapeError("conv2d", "channels", c_in, x.shape[1])
    if padding is None:
        padding = (kh - 1) // 2
    elif padding != (kh - 1) // 2:
        raise ShapeError("conv2d", "padding", (kh - 1) // 2, padding)
    if bias is not None and tuple(bias.shape) != (c_out,):
        raise ShapeError("conv2d", "bias length", c_out, tuple(bias.shape))
    return F.conv2d(x, weight, bias, padding=padding)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    same_shape(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    same_shape(a, b, "mul")
    return a * b


def exp(t: torch.Tensor) -> torch.Tensor:
    return torch.exp(check4(t, "exp"))


def log(t: torch.Tensor) -> torch.Tensor:
    return torch.log(check4(t, "log"))


def relu(t: torch.Tensor) -> torch.Tensor:
    return F.relu(check4(t, "relu"))


def nearest_upsample_x2(t: torch.Tensor) -> torch.Tensor:
    check4(t, "nearest_upsample_x2")
    return t.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def channel_concat(*ts: torch.Tensor) -> torch.Tensor:
    if not ts:
        raise ShapeError("channel_concat", "operand count", ">= 1", 0)
    ref = check4(ts[0], "channel_concat")
    for t in ts[1:]:
        check4(t, "channel_concat")
        for i in (0, 2, 3):
            if t.shape[i] != ref.shape[i]:
                raise ShapeError("channel_concat", _DIMS[i], ref.shape[i], t.shape[i])
    return torch.cat(ts, dim=1)


def channel_split(t: torch.Tensor, sizes: Sequence[int] | int) -> tuple[torch.Tensor, ...]:
    """Split along channels. An int ``k`` means ``(k, C - k)``."""
    check4(t, "channel_split")
    c = t.shape[1]
    if isinstance(sizes, int):
        if not 0 < sizes < c:
            raise ShapeError("channel_split", "offset", f"in (0, {c})", sizes)
        sizes = (sizes, c - sizes)
    if any(s <= 0 for s in sizes) or sum(sizes) != c:
        raise ShapeError("channel_split", "channels", c, tuple(sizes))
    return tuple(torch.split(t, list(sizes), dim=1))


# ---------------------------------------------------------------------------
# gradients and optimisation
# ---------------------------------------------------------------------------


def backward(loss: torch.Tensor, params: Iterable[torch.nn.Parameter]) -> None:
    """Populate ``.grad`` of every parameter from a scalar loss.

    Parameters the loss does not depend on get an all-zero gradient rather
    than ``None``.
    """
    if loss.dim() != 0:
        raise ShapeError("backward", "loss rank", 0, loss.dim())
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()


class Adam:
    """Bias-corrected Adam over an explicit named parameter list.

    Args:
        named_params: ``(name, parameter)`` pairs; names appear in error messages
            and in checkpoints.
        beta1, beta2: Moment decay rates.
        eps: Denominator offset.
    """

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {n: torch.zeros_like(p) for n, p in self.params}
        self.second_moment = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self, learning_rate: float) -> None:
        if not learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        for name, p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = self.first_moment[name]
            v = self.second_moment[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-learning_rate / c1)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, _ in self.params:
            out[f"adam/m/{name}"] = self.first_moment[name]
            out[f"adam/v/{name}"] = self.second_moment[name]
        out["adam/step"] = torch.tensor([float(self.step_count)], dtype=torch.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name, p in self.params:
            for kind, store in (("m", self.first_moment), ("v", self.second_moment)):
                key = f"adam/{kind}/{name}"
                if key in tensors:
                    store[name] = tensors[key].to(p.dtype).reshape(p.shape).clone()
        if "adam/step" in tensors:
            self.step_count = int(tensors["adam/step"].item())


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class CounterRNG:
    """Seeded Philox-4x64 stream (numpy) with Box-Muller Gaussians.

    Philox is counter-based, so a given seed yields the same stream on any
    platform. Gaussian draws consume two uniforms each.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, key: int) -> "CounterRNG":
        """Independent child stream, a pure function of (seed, key)."""
        return CounterRNG((self.seed * 0x9E3779B97F4A7C15 + key + 1) & 0xFFFFFFFFFFFFFFFF)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
        return std * z[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal_tensor(self, shape, std: float = 1.0, dtype=DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.normal(tuple(shape), std)).to(dtype)

    def uniform_tensor(self, shape, low: float = 0.0, high: float = 1.0,
                       dtype=DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.uniform(tuple(shape), low, high)).to(dtype)
