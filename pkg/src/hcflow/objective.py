"""Likelihood, latent sampling and the two training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import numerics as nx
from .errors import ConfigError

LOG_2PI = math.log(2 * math.pi)
DEQUANT_WIDTH = 1.0 / 256.0


def gaussian_logp(t: torch.Tensor, mean=0.0, stdev: float = 1.0) -> torch.Tensor:
    """Diagonal Gaussian log-density summed per batch item (nats)."""
    if not stdev > 0:
        raise ValueError(f"stdev must be positive, got {stdev}")
    if isinstance(mean, torch.Tensor):
        nx.same_shape(t, mean, "gaussian_logp")
    dens = -0.5 * LOG_2PI - math.log(stdev) - (t - mean) ** 2 / (2.0 * stdev ** 2)
    return dens.flatten(1).sum(1)


@dataclass
class LossWeights:
    """lambda1..lambda4; interpretation depends on the task.

    SR: nll, pixel, perceptual, gan. Rescaling: pixel_hr, pixel_lr, latent.
    """

    lambda1: float
    lambda2: float
    lambda3: float = 0.0
    lambda4: float = 0.0

    @classmethod
    def sr(cls) -> "LossWeights":
        return cls(2e-3, 1.0)

    @classmethod
    def rescaling(cls) -> "LossWeights":
        return cls(1.0, 5e-2, 1e-5)

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def validate(self, task: str) -> None:
        w = self.as_tuple()
        if any(v < 0 or not math.isfinite(v) for v in w):
            raise ConfigError(f"loss weights must be finite and nonnegative: {w}")
        if not any(v > 0 for v in w):
            raise ConfigError("at least one loss weight must be positive")
        if task == "sr" and (self.lambda3 or self.lambda4):
            raise ConfigError("perceptual/GAN weights (lambda3, lambda4) are not supported")
        if task == "rescale" and self.lambda4:
            raise ConfigError("rescaling loss has three weights; lambda4 must be 0")


@dataclass
class NLLTerms:
    nats: torch.Tensor           # per item
    bits_per_dim: torch.Tensor   # per item
    logp_z: torch.Tensor
    logp_y: torch.Tensor
    logdet: torch.Tensor


def dequantize(x: torch.Tensor, rng: nx.CounterRNG) -> torch.Tensor:
    return x + rng.uniform_tensor(x.shape, 0.0, DEQUANT_WIDTH, dtype=x.dtype)


def nll(model, x: torch.Tensor, y_star: torch.Tensor, rng: nx.CounterRNG | None = None) -> NLLTerms:
    """Exact negative log-likelihood of x given the LR image.

    ``-[log N(z; 0, I) + log N(y; y_star, lr_sigma^2 I) + logdet]``. When
    ``rng`` is given, uniform dequantisation noise on [0, 1/256) is added to x.
    """
    if rng is not None:
        x = dequantize(x, rng)
    d = model.forward_decompose(x)
    nx.same_shape(d.y, y_star, "nll")
    logp_z = sum(gaussian_logp(z) for z in d.z)
    logp_y = gaussian_logp(d.y, y_star, model.config.lr_sigma)
    nats = -(logp_z + logp_y + d.logdet)
    dims = x[0].numel()
    return NLLTerms(nats, nats / (dims * math.log(2)), logp_z, logp_y, d.logdet)


def sample_latents(model, y_star: torch.Tensor, tau: float, rng: nx.CounterRNG | None = None):
    """z_l ~ tau * N(0, I) for every level; tau = 0 gives zeros without drawing."""
    if tau < 0:
        raise ValueError(f"temperature must be >= 0, got {tau}")
    shapes = model.latent_shapes(y_star.shape)
    if tau == 0:
        return [y_star.new_zeros(s) for s in shapes]
    if rng is None:
        raise ValueError("sampling with tau > 0 needs an rng")
    return [rng.normal_tensor(s, tau, dtype=y_star.dtype) for s in shapes]


def l1(a, b):
    nx.same_shape(a, b, "l1")
    return (a - b).abs().mean()


def l2(a, b):
    nx.same_shape(a, b, "l2")
    return ((a - b) ** 2).mean()


def sr_loss(model, x, y_star, weights: LossWeights, rng: nx.CounterRNG | None = None):
    """``lambda1 * nll + lambda2 * L1(x, x_tau0)``.

    The NLL term is the batch mean in nats per dimension. The pixel term
    regenerates x from ``y_star`` with all-zero latents. Returns
    ``(loss, parts)`` where ``parts`` holds detached floats for logging.
    """
    weights.validate("sr")
    total = x.new_zeros(())
    parts = {}
    if weights.lambda1:
        terms = nll(model, x, y_star, rng)
        nll_dim = terms.nats.mean() / x[0].numel()
        total = total + weights.lambda1 * nll_dim
        parts["nll"] = nll_dim.item()
        parts["bpd"] = terms.bits_per_dim.mean().item()
    if weights.lambda2:
        x0 = model.inverse_generate(y_star, sample_latents(model, y_star, 0.0))
        pix = l1(x, x0)
        total = total + weights.lambda2 * pix
        parts["pixel"] = pix.item()
    parts["loss"] = total.item()
    return total, parts


def rescaling_loss(model, x, y_star, weights: LossWeights, rng: nx.CounterRNG | None = None,
                   tau: float = 1.0):
    """``lambda1 * L1(x, x_rec) + lambda2 * L2(y_star, y) + lambda3 * mean(z^2)``.

    ``(y, z) = forward(x)`` and ``x_rec = inverse(y, z_sampled)`` with fresh
    latents at temperature ``tau``. Gradients flow through both directions.
    """
    weights.validate("rescale")
    d = model.forward_decompose(x)
    nx.same_shape(d.y, y_star, "rescaling_loss")
    z_s = sample_latents(model, d.y, tau, rng)
    x_rec = model.inverse_generate(d.y, z_s)
    pix_hr = l1(x, x_rec)
    pix_lr = l2(y_star, d.y)
    latent = torch.cat([z.flatten() for z in d.z]).pow(2).mean()
    total = weights.lambda1 * pix_hr + weights.lambda2 * pix_lr + weights.lambda3 * latent
    parts = {"pixel_hr": pix_hr.item(), "pixel_lr": pix_lr.item(),
             "latent": latent.item(), "loss": total.item()}
    return total, parts


def task_loss(task: str, model, x, y_star, weights, rng=None):
    if task == "sr":
        return sr_loss(model, x, y_star, weights, rng)
    if task == "rescale":
        return rescaling_loss(model, x, y_star, weights, rng)
    raise ConfigError(f"unknown task {task!r}")
