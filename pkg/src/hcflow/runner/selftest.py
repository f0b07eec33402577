"""Built-in invariant suite behind the ``selftest`` subcommand.

Each check returns a :class:`CheckResult`; :func:`run_all` executes the
round-trip, Jacobian, gradient, actnorm, temperature and checkpoint checks.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .. import numerics as nx
from ..checks import (gradient_check, layer_logdet_error, model_logdet_error,
                      randomize_parameters)
from ..dataio import bicubic_resize, diversity, synthetic_textures
from ..errors import CheckpointError
from ..flow_layers import (ActNorm, AffineCoupling, HaarSqueeze, InvConv1x1, Squeeze)
from ..model import HCFlow, HCFlowConfig
from ..objective import LossWeights, nll, rescaling_loss, sample_latents, sr_loss
from .checkpoint import load_checkpoint, save_checkpoint

ROUND_TRIP_TOL = 1e-4
LOGDET_TOL = 1e-3
GRAD_TOL = 1e-3
ACTNORM_MEAN_TOL = 1e-5
ACTNORM_STD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def tiny_config(**kw) -> HCFlowConfig:
    base = dict(levels=1, flow_steps=1, cond_flow_steps=1, cond_width=4, cond_blocks=1,
                coupling_hidden=8)
    base.update(kw)
    return HCFlowConfig(**base)


def invertibility_configs():
    for levels in (1, 2):
        for squeeze in ("plain_squeeze", "haar"):
            for mode in ("hierarchical", "same_level", "none"):
                yield HCFlowConfig(levels=levels, squeeze=squeeze, conditioning=mode,
                                   use_1x1_conv=squeeze == "plain_squeeze")


@_timed
def check_invertibility(trials: int = 50, seed: int = 0, size: int = 16) -> CheckResult:
    """Round trips over L x squeeze kind x conditioning mode."""
    rng = nx.CounterRNG(seed)
    worst = 0.0
    n = 0
    with torch.no_grad():
        for cfg in invertibility_configs():
            model = HCFlow(cfg, seed=int(rng.integers(0, 2 ** 31)))
            for _ in range(trials):
                randomize_parameters(model, rng)
                x = rng.uniform_tensor((1, 3, size, size))
                d = model.forward_decompose(x)
                err = (model.inverse_generate(d.y, d.z) - x).abs().max().item()
                worst = max(worst, err)
                n += 1
    return CheckResult("invertibility", worst < ROUND_TRIP_TOL,
                       f"{n} round trips, max error {worst:.2e} (< {ROUND_TRIP_TOL:g})")


def layer_cases(rng: nx.CounterRNG):
    """(name, layer, input, cond) for every layer type on <= 48-element inputs."""
    cases = []
    x48 = rng.uniform_tensor((1, 3, 4, 4))
    cases.append(("squeeze", Squeeze(), x48, None))
    cases.append(("haar", HaarSqueeze(), x48, None))
    an = ActNorm(3)
    cases.append(("actnorm", an, x48, None))
    conv = InvConv1x1(4)
    cases.append(("invertible_1x1_conv", conv, rng.uniform_tensor((1, 4, 3, 3)), None))
    coup = AffineCoupling(2, 0, hidden=4)
    cases.append(("affine_coupling", coup, rng.uniform_tensor((1, 2, 2, 2)), None))
    ccoup = AffineCoupling(3, 2, hidden=4)
    cases.append(("conditional_affine_coupling", ccoup, rng.uniform_tensor((1, 3, 4, 4)),
                  rng.uniform_tensor((1, 2, 4, 4))))
    for _, layer, _, _ in cases:
        randomize_parameters(layer, rng, strength=1.0)
    return cases


@_timed
def check_jacobian(seed: int = 0) -> CheckResult:
    """Analytic logdet vs finite-difference Jacobian, per layer and tiny model."""
    rng = nx.CounterRNG(seed)
    errs = {}
    for name, layer, x, cond in layer_cases(rng):
        errs[name] = layer_logdet_error(layer, x, cond)
    model = HCFlow(tiny_config(), seed=1)
    randomize_parameters(model, rng)
    errs["hcflow_L1_K1_P1"] = model_logdet_error(model, rng.uniform_tensor((1, 3, 4, 4)))
    worst = max(errs.values())
    return CheckResult("jacobian_oracle", worst < LOGDET_TOL,
                       f"{len(errs)} maps, max |logdet error|/dim {worst:.2e} (< {LOGDET_TOL:g})")


def _gradient_losses(rng: nx.CounterRNG):
    x = rng.uniform_tensor((2, 3, 8, 8), dtype=torch.float64)
    y = rng.uniform_tensor((2, 3, 4, 4), dtype=torch.float64)
    noise_seed = int(rng.integers(0, 2 ** 31))

    def nll_loss(m):
        return nll(m, x, y, nx.CounterRNG(noise_seed)).nats.mean() / x[0].numel()

    def sr(m):
        return sr_loss(m, x, y, LossWeights.sr(), nx.CounterRNG(noise_seed))[0]

    def rescale(m):
        return rescaling_loss(m, x, y, LossWeights.rescaling(), nx.CounterRNG(noise_seed))[0]

    return {"nll": nll_loss, "sr_loss": sr, "rescaling_loss": rescale}


@_timed
def check_gradients(coords_per_loss: int = 70, seed: int = 0) -> CheckResult:
    """Autograd vs central differences on the tiny L=1 model, three losses."""
    rng = nx.CounterRNG(seed)
    model = HCFlow(tiny_config(), seed=2)
    randomize_parameters(model, rng)
    worst, total = 0.0, 0
    for name, fn in _gradient_losses(rng).items():
        err, n = gradient_check(fn, model, rng, coords_per_loss)
        worst = max(worst, err)
        total += n
    return CheckResult("gradient_oracle", worst < GRAD_TOL,
                       f"{total} coordinates, max relative error {worst:.2e} (< {GRAD_TOL:g})")


@_timed
def check_actnorm_init(seed: int = 0) -> CheckResult:
    rng = nx.CounterRNG(seed)
    layer = ActNorm(6)
    x = rng.normal_tensor((8, 6, 8, 8), 3.0) + rng.normal_tensor((1, 6, 1, 1), 5.0)
    layer.initialize(x)
    with torch.no_grad():
        out = layer(x).output.to(torch.float64)
    flat = out.transpose(0, 1).reshape(6, -1)
    mean_err = flat.mean(1).abs().max().item()
    std_err = (flat.std(1, unbiased=False) - 1).abs().max().item()
    ok = mean_err < ACTNORM_MEAN_TOL and std_err < ACTNORM_STD_TOL
    return CheckResult("actnorm_init", ok,
                       f"max |mean| {mean_err:.1e} (< 1e-5), max |std-1| {std_err:.1e} (< 1e-4)")


@_timed
def check_temperature(model: HCFlow | None = None, seed: int = 0) -> CheckResult:
    """tau=0 generation repeats exactly; tau=0.9 yields positive diversity.

    The LR input is a bicubic-downscaled synthetic texture: a trained flow
    learns strongly contracting couplings, so its inverse can overflow on
    inputs far from natural LR images (e.g. uniform noise).
    """
    rng = nx.CounterRNG(seed)
    if model is None:
        model = HCFlow(HCFlowConfig(), seed=3)
        randomize_parameters(model, rng)
    f = model.config.scale_factor
    y = bicubic_resize(synthetic_textures(1, 32, seed=seed), 1 / f).clamp(0, 1)
    with torch.no_grad():
        cold = [model.inverse_generate(y, sample_latents(model, y, 0.0)) for _ in range(5)]
        warm = [model.inverse_generate(y, sample_latents(model, y, 0.9, rng)) for _ in range(5)]
    identical = all(torch.equal(cold[0], c) for c in cold[1:])
    d0, d9 = diversity(cold), diversity(warm)
    ok = identical and d0 == 0 and d9 > d0
    return CheckResult("temperature", ok,
                       f"tau=0 bit-identical={identical}, diversity tau=0 {d0:.2e}, tau=0.9 {d9:.3e}")


@_timed
def check_checkpoint(seed: int = 0) -> CheckResult:
    rng = nx.CounterRNG(seed)
    model = HCFlow(HCFlowConfig(levels=2), seed=4)
    randomize_parameters(model, rng)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.hcfl"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        same = all(torch.equal(a, b) for a, b in zip(model.parameters(), loaded.parameters()))
        try:
            load_checkpoint(path, HCFlow(HCFlowConfig(levels=3), seed=0))
            rejected, msg = False, "cross-config load accepted"
        except CheckpointError as exc:
            rejected, msg = "parameter" in str(exc), str(exc)
    return CheckResult("checkpoint", same and rejected,
                       f"bitwise round trip={same}; cross-config rejected: {msg.split(': ', 1)[-1]}")


def run_all(model: HCFlow | None = None, echo=print) -> list[CheckResult]:
    torch.set_num_threads(1)
    results = []
    for check in (check_invertibility, check_jacobian, check_gradients, check_actnorm_init,
                  lambda: check_temperature(model), check_checkpoint):
        res = check()
        results.append(res)
        if echo:
            echo(res.line())
    return results
