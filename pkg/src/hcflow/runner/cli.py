"""Command-line entry point: ``hcflow <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .. import dataio
from .. import numerics as nx
from ..errors import HCFlowError
from ..objective import sample_latents
from .checkpoint import load_checkpoint, read_archive, write_archive
from .config import load_config
from .selftest import run_all
from .train import train


def _load_model(path):
    model, archive = load_checkpoint(path)
    model.eval()
    return model, archive


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.init_ckpt:
        cfg.init_ckpt = args.init_ckpt
    result = train(cfg, args.out, echo=print)
    print(f"checkpoint={result.checkpoint}")
    return 0


@torch.no_grad()
def cmd_sr(args) -> int:
    model, _ = _load_model(args.ckpt)
    lr = dataio.load_png(args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = nx.CounterRNG(args.seed)
    samples = []
    for i in range(args.samples):
        x = model.inverse_generate(lr, sample_latents(model, lr, args.tau, rng))
        samples.append(x.clamp(0, 1))
        dataio.save_png(x, out / f"sr_{i:03d}.png")
    if args.hr:
        hr = dataio.load_png(args.hr)
        model_y = model.forward_decompose(hr).y if hr.shape[2] % model.config.scale_factor == 0 else None
        report = dataio.metrics(samples, hr, lr, model_y=model_y)
        report.write(out / "metrics")
        sys.stdout.write(report.to_text())
    return 0


@torch.no_grad()
def cmd_rescale_down(args) -> int:
    model, _ = _load_model(args.ckpt)
    f = model.config.scale_factor
    hr = dataio.load_png(args.hr)
    hr = hr[:, :, :hr.shape[2] - hr.shape[2] % f, :hr.shape[3] - hr.shape[3] % f]
    d = model.forward_decompose(hr)
    out = Path(args.out)
    dataio.save_png(d.y, out / "lr.png")
    tensors = {f"z{i + 1}": z for i, z in enumerate(d.z)}
    write_archive(out / "latents.hcfl", tensors, text="kind = latents\n")
    print(f"lr={out / 'lr.png'} latents={out / 'latents.hcfl'}")
    return 0


@torch.no_grad()
def cmd_rescale_up(args) -> int:
    model, _ = _load_model(args.ckpt)
    lr = dataio.load_png(args.lr)
    if args.latents:
        arch = read_archive(args.latents)
        z = [arch.tensors[f"z{i + 1}"] for i in range(model.config.levels)]
    else:
        z = sample_latents(model, lr, args.tau, nx.CounterRNG(args.seed))
    x = model.inverse_generate(lr, z)
    out = Path(args.out)
    dataio.save_png(x, out / "hr.png")
    print(f"hr={out / 'hr.png'}")
    return 0


@torch.no_grad()
def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    f = model.config.scale_factor
    pairs = dataio.load_pairs(args.dir, f)
    if not pairs:
        raise HCFlowError(f"no PNG pairs found in {args.dir}")
    rng = nx.CounterRNG(args.seed)
    rows = []
    keys = ("psnr_rgb", "psnr_y", "ssim", "consistency", "diversity", "lr_psnr")
    print("image " + " ".join(keys))
    for p in pairs:
        samples = [model.inverse_generate(p.lr, sample_latents(model, p.lr, args.tau, rng)).clamp(0, 1)
                   for _ in range(args.samples)]
        rep = dataio.metrics(samples, p.hr, p.lr, model_y=model.forward_decompose(p.hr).y)
        row = rep.as_dict()
        rows.append(row)
        print(Path(p.source).name + " " + " ".join(f"{row.get(k, float('nan')):.4f}" for k in keys))
    mean = {k: sum(r[k] for r in rows) / len(rows) for k in keys if all(k in r for r in rows)}
    print("mean " + " ".join(f"{mean.get(k, float('nan')):.4f}" for k in keys))
    if args.out:
        report = dataio.MetricReport(**{k: mean.get(k) for k in keys})
        report.write(Path(args.out) / "metrics")
    return 0


def cmd_selftest(args) -> int:
    model = _load_model(args.ckpt)[0] if args.ckpt else None
    results = run_all(model)
    passed = sum(r.passed for r in results)
    print(f"selftest: {passed}/{len(results)} checks passed")
    return 0 if passed == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcflow", description="Hierarchical conditional flow")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-ckpt", default="")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sr", help="super-resolve an LR image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--lr", required=True)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--hr", default="")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("rescale-down", help="HR image -> LR image + latents")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--hr", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rescale_down)

    s = sub.add_parser("rescale-up", help="LR image (+ latents) -> HR image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--lr", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--latents", default="")
    g.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rescale_up)

    s = sub.add_parser("eval", help="metrics over a directory of image pairs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dir", required=True)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--samples", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in invariant suite")
    s.add_argument("--ckpt", default="")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HCFlowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
