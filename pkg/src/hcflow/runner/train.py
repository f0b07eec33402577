"""Training loop for the SR and rescaling tasks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import torch

from .. import dataio
from .. import numerics as nx
from ..errors import HCFlowError, TrainingDiverged
from ..model import HCFlow
from ..objective import nll, sample_latents, task_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: HCFlow
    records: list[dict] = field(default_factory=list)
    val_records: list[dict] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    checkpoint: str | None = None
    optimizer: nx.Adam | None = None


def load_datasets(cfg: TrainConfig):
    scale = cfg.model.scale_factor
    if cfg.train_dir:
        train = dataio.load_pairs(cfg.train_dir, scale)
    else:
        train = dataio.synthetic_pairs(cfg.n_train, cfg.hr_patch, scale, cfg.data_seed)
    if cfg.val_dir:
        val = dataio.load_pairs(cfg.val_dir, scale)
    else:
        val = dataio.synthetic_pairs(cfg.n_val, cfg.hr_patch, scale, cfg.data_seed + 1000)
    if not train:
        raise HCFlowError("training dataset is empty")
    return train, val


def stack_pairs(pairs, hr_patch: int, scale: int):
    """Stack a validation split, center-cropping each pair to ``hr_patch``."""
    hrs, lrs = [], []
    lp = hr_patch // scale
    for p in pairs:
        h, w = p.lr.shape[2], p.lr.shape[3]
        if h < lp or w < lp:
            continue
        ty, tx = (h - lp) // 2, (w - lp) // 2
        lrs.append(p.lr[:, :, ty:ty + lp, tx:tx + lp])
        hrs.append(p.hr[:, :, ty * scale:(ty + lp) * scale, tx * scale:(tx + lp) * scale])
    return torch.cat(hrs), torch.cat(lrs)


@torch.no_grad()
def validate(model: HCFlow, task: str, hr: torch.Tensor, lr: torch.Tensor, rng: nx.CounterRNG) -> dict:
    """Held-out metrics: LR-PSNR for both tasks plus task-specific HR PSNRs."""
    scale = model.config.scale_factor
    d = model.forward_decompose(hr)
    out = {"lr_psnr": dataio.psnr(d.y, lr)}
    if task == "sr":
        x0 = model.inverse_generate(lr, sample_latents(model, lr, 0.0))
        out["psnr_tau0"] = dataio.psnr(x0.clamp(0, 1), hr)
        out["bpd"] = float(nll(model, hr, lr).bits_per_dim.mean())
    else:
        exact = model.inverse_generate(d.y, d.z)
        sampled = model.inverse_generate(d.y, sample_latents(model, d.y, 1.0, rng))
        out["psnr_exact"] = dataio.psnr(exact, hr)
        out["psnr_y_sampled"] = dataio.psnr_y(sampled.clamp(0, 1), hr, scale)
        bic = dataio.bicubic_resize(dataio.bicubic_resize(hr, Fraction(1, scale)), scale)
        out["psnr_y_bicubic"] = dataio.psnr_y(bic.clamp(0, 1), hr, scale)
    return out


def _fmt_record(rec: dict) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def train(cfg: TrainConfig, out_dir=None, echo=None) -> TrainResult:
    """Run training; writes ``train.log`` and checkpoints when ``out_dir`` is given.

    The first batch initialises every actnorm from data (skipped when
    starting from ``init_ckpt``). Raises :class:`TrainingDiverged` on a
    non-finite loss, leaving the last periodic checkpoint in place.
    """
    cfg.validate()
    torch.set_num_threads(1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    logfile = open(out / "train.log", "w") if out is not None else None

    def emit(rec):
        line = _fmt_record(rec)
        log.info(line)
        if logfile:
            logfile.write(line + "\n")
            logfile.flush()
        if echo:
            echo(line)

    scale = cfg.model.scale_factor
    train_pairs, val_pairs = load_datasets(cfg)
    val_hr, val_lr = stack_pairs(val_pairs, cfg.hr_patch, scale)
    rng = nx.CounterRNG(cfg.seed)
    data_rng, noise_rng, val_rng = rng.spawn(1), rng.spawn(2), rng.spawn(3)

    model = HCFlow(cfg.model, seed=cfg.seed)
    fresh = not cfg.init_ckpt
    if not fresh:
        load_checkpoint(cfg.init_ckpt, model)
    model.train()
    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = nx.Adam(named)
    result = TrainResult(model=model, optimizer=opt)
    last_good = None

    def checkpoint(step, name):
        nonlocal last_good
        if out is None:
            return
        path = out / name
        save_checkpoint(model, path, opt, step, cfg)
        last_good = str(path)
        result.checkpoint = last_good

    try:
        for step in range(cfg.total_steps + 1):
            hr, lr = dataio.sample_patches(train_pairs, cfg.hr_patch, cfg.batch, data_rng,
                                           scale, cfg.augment)
            if step == 0 and fresh:
                model.data_init(hr)
            final = step == cfg.total_steps
            if final:
                with torch.no_grad():
                    loss, parts = task_loss(cfg.task, model, hr, lr, cfg.weights, noise_rng)
            else:
                loss, parts = task_loss(cfg.task, model, hr, lr, cfg.weights, noise_rng)
            if not math.isfinite(float(loss.detach())):
                raise TrainingDiverged(step, last_good)
            logged = step % cfg.log_interval == 0 or final
            if logged and "bpd" not in parts:
                with torch.no_grad():
                    parts["bpd"] = float(nll(model, hr, lr, noise_rng).bits_per_dim.mean())
            lr_now = cfg.learning_rate(min(step, cfg.total_steps - 1))
            if logged:
                rec = {"step": step, "lr": lr_now, **parts}
                result.records.append(rec)
                emit(rec)
            if step and (step % cfg.val_interval == 0 or final):
                model.eval()
                rec = {"step": step, "split": "val",
                       **validate(model, cfg.task, val_hr, val_lr, val_rng)}
                result.val_records.append(rec)
                emit(rec)
                model.train()
            if final:
                break
            nx.backward(loss, params)
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step(lr_now)
            result.lr_history.append(lr_now)
            if (step + 1) % cfg.ckpt_interval == 0 and step + 1 < cfg.total_steps:
                checkpoint(step + 1, f"step_{step + 1:07d}.hcfl")
        checkpoint(cfg.total_steps, "final.hcfl")
    finally:
        if logfile:
            logfile.close()
    model.eval()
    return result
