"""Numerical oracles shared by ``selftest`` and the test suite.

Finite-difference Jacobians and gradients are always evaluated in float64
on a deep copy, independent of the float32 path they check.
"""

from __future__ import annotations

import copy
import math
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .conditioner import Conv
from .flow_layers import ActNorm, InvConv1x1


@torch.no_grad()
def randomize_parameters(model: nn.Module, rng: nx.CounterRNG, strength: float = 0.5) -> None:
    """Move every parameter away from its identity-like initialisation.

    Magnitudes are scaled by fan-in so that random models stay well
    conditioned (coupling scales within a few e-folds of 1).
    """
    for m in model.modules():
        if isinstance(m, Conv):
            fan_in = m.weight[0].numel()
            std = (strength if m.zero_init else 1.0) / math.sqrt(fan_in)
            m.weight.copy_(rng.normal_tensor(m.weight.shape, std, m.weight.dtype))
            m.bias.copy_(rng.normal_tensor(m.bias.shape, 0.1 * strength, m.bias.dtype))
        elif isinstance(m, InvConv1x1):
            q, r = np.linalg.qr(rng.normal((m.channels, m.channels)))
            q = q * np.sign(np.diag(r))
            w = q + 0.1 * strength * rng.normal((m.channels, m.channels))
            m.weight.copy_(torch.from_numpy(w).to(m.weight.dtype))
        elif isinstance(m, ActNorm):
            m.scale.copy_(torch.from_numpy(
                np.exp(0.2 * strength * rng.normal(tuple(m.scale.shape)))).to(m.scale.dtype))
            m.bias.copy_(rng.normal_tensor(m.bias.shape, 0.2 * strength, m.bias.dtype))


def as_float64(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module).to(torch.float64)


def numeric_jacobian(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a flat-output map at a float64 point."""
    x = x.detach().to(torch.float64)
    n = x.numel()
    cols = []
    with torch.no_grad():
        for i in range(n):
            e = torch.zeros(n, dtype=torch.float64)
            e[i] = step
            e = e.reshape(x.shape)
            cols.append(((fn(x + e) - fn(x - e)) / (2 * step)).reshape(-1).numpy())
    return np.stack(cols, axis=1)


def numeric_logdet(fn, x, step: float = 1e-5) -> float:
    jac = numeric_jacobian(fn, x, step)
    if jac.shape[0] != jac.shape[1]:
        raise ValueError(f"Jacobian is not square: {jac.shape}")
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0:
        return -math.inf
    return float(logabs)


def layer_logdet_error(layer: nn.Module, x: torch.Tensor, cond: torch.Tensor | None = None) -> float:
    """|analytic - numeric| log-determinant, divided by input dimensions."""
    with torch.no_grad():
        analytic = float(layer(x, cond).logdet_delta[0])
    layer64 = as_float64(layer)
    cond64 = None if cond is None else cond.to(torch.float64)
    numeric = numeric_logdet(lambda t: layer64(t, cond64).output, x)
    return abs(analytic - numeric) / x.numel()


def model_flat_forward(model) -> Callable[[torch.Tensor], torch.Tensor]:
    def fn(x):
        d = model.forward_decompose(x)
        return torch.cat([d.y.flatten(1)] + [z.flatten(1) for z in d.z], dim=1)
    return fn


def model_logdet_error(model, x: torch.Tensor) -> float:
    with torch.no_grad():
        analytic = float(model.forward_decompose(x).logdet[0])
    numeric = numeric_logdet(model_flat_forward(as_float64(model)), x)
    return abs(analytic - numeric) / x.numel()


def gradient_check(loss_fn: Callable[[nn.Module], torch.Tensor], model: nn.Module,
                   rng: nx.CounterRNG, n_coords: int, step: float = 1e-5,
                   floor_ratio: float = 1e-6) -> tuple[float, int]:
    """Compare autograd against central differences at random coordinates.

    ``loss_fn(module)`` must return a scalar and be deterministic. Both sides
    run in float64 on a copy of ``model``. Returns the largest per-coordinate
    relative error ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)`` and the number
    of coordinates tested, where ``floor = floor_ratio * max|g_a|``: gradients
    many orders below the loss's largest one sit under the cancellation noise
    of the difference quotient and are compared on that absolute scale.
    """
    m64 = as_float64(model)
    params = list(m64.parameters())
    loss = loss_fn(m64)
    nx.backward(loss, params)
    grads = [p.grad.clone() for p in params]
    floor = floor_ratio * max(g.abs().max().item() for g in grads)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            k = int(rng.integers(0, len(params))) if rng.uniform(()) < 0.5 else \
                int(np.searchsorted(np.cumsum(sizes) / sizes.sum(), rng.uniform(())))
            k = min(k, len(params) - 1)
            p = params[k]
            i = int(rng.integers(0, p.numel()))
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn(m64).item()
            flat[i] = orig - step
            down = loss_fn(m64).item()
            flat[i] = orig
            g_fd = (up - down) / (2 * step)
            g_a = grads[k].view(-1)[i].item()
            err = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), floor)
            worst = max(worst, err)
    return worst, n_coords
