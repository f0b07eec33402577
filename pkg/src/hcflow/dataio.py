"""Images, bicubic resampling, patch sampling and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage, signal

from . import numerics as nx
from .errors import HCFlowError, ShapeError

PSNR_SATURATION = 100.0


class ImageIOError(HCFlowError, OSError):
    pass


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def load_png(path) -> torch.Tensor:
    """Read an 8-bit RGB PNG as a (1, 3, H, W) float32 tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    if mode != "RGB":
        raise ImageIOError(f"{path}: expected an 8-bit RGB image, got mode {mode!r}")
    t = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)
    return t.unsqueeze(0).contiguous()


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """First batch item as an HxWx3 uint8 array."""
    nx.check4(t, "to_uint8")
    if not torch.isfinite(t[0]).all():
        raise ImageIOError("to_uint8: image has non-finite values (input far outside the training range?)")
    arr = t[0].detach().to(torch.float64).clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(t: torch.Tensor, path) -> None:
    if t.shape[1] != 3:
        raise ShapeError("save_png", "channels", 3, t.shape[1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(t), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# bicubic
# ---------------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) resampling matrix for one axis.

    Pixel-centre aligned; when shrinking with ``antialias`` the kernel is
    stretched by ``1 / scale``. Out-of-range taps are clamped to the edge.
    """
    if antialias and scale < 1:
        width = 4.0 / scale

        def kernel(v):
            return scale * cubic(scale * v)
    else:
        width = 4.0
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.reshape(-1)), w.reshape(-1))
    return mat


def _as_fraction(scale) -> Fraction:
    return Fraction(scale).limit_denominator(4096)


def bicubic_resize(t: torch.Tensor, scale, antialias: bool = True) -> torch.Tensor:
    """Resize by a rational factor with a = -0.5 cubic convolution.

    ``scale = 1/4`` shrinks 4x. Output side is ``ceil(side * scale)``.
    """
    nx.check4(t, "bicubic_resize")
    s = _as_fraction(scale)
    if s <= 0:
        raise ShapeError("bicubic_resize", "scale", "> 0", scale)
    h, w = t.shape[2], t.shape[3]
    oh, ow = math.ceil(h * s), math.ceil(w * s)
    if oh < 1 or ow < 1:
        raise ShapeError("bicubic_resize", "target size", ">= 1", (oh, ow))
    if s == 1:
        return t.clone()
    mh = torch.from_numpy(resize_matrix(h, oh, float(s), antialias))
    mw = torch.from_numpy(resize_matrix(w, ow, float(s), antialias))
    out = torch.einsum("ih,bchw,jw->bcij", mh, t.detach().to(torch.float64), mw)
    return out.to(t.dtype)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class ImagePair:
    hr: torch.Tensor
    lr: torch.Tensor
    source: str = ""


def make_pair(hr: torch.Tensor, scale: int, source: str = "") -> ImagePair:
    """Crop ``hr`` to a multiple of ``scale`` and derive its bicubic LR image."""
    h = hr.shape[2] - hr.shape[2] % scale
    w = hr.shape[3] - hr.shape[3] % scale
    hr = hr[:, :, :h, :w].contiguous()
    lr = bicubic_resize(hr, Fraction(1, scale)).clamp(0, 1)
    return ImagePair(hr, lr, source)


def load_pairs(directory, scale: int) -> list[ImagePair]:
    """Pairs from ``directory``.

    With ``hr/`` and ``lr/`` subdirectories, files are matched by name;
    otherwise every PNG is an HR image and LR is derived by bicubic.
    """
    d = Path(directory)
    if (d / "hr").is_dir() and (d / "lr").is_dir():
        pairs = []
        for p in sorted((d / "hr").glob("*.png")):
            hr, lr = load_png(p), load_png(d / "lr" / p.name)
            if hr.shape[2] != lr.shape[2] * scale or hr.shape[3] != lr.shape[3] * scale:
                raise ShapeError("load_pairs", "LR size", "HR size / scale", p.name)
            pairs.append(ImagePair(hr, lr, str(p)))
        return pairs
    return [make_pair(load_png(p), scale, str(p)) for p in sorted(d.glob("*.png"))]


def synthetic_textures(n: int, size: int = 32, seed: int = 0) -> torch.Tensor:
    """Deterministic procedural RGB textures, shape (n, 3, size, size) in [0, 1].

    Each is a mixture of oriented sinusoids per channel plus Gaussian-filtered
    noise, with a random colour mixing matrix.
    """
    rng = nx.CounterRNG(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, 3, size, size))
    for k in range(n):
        base = np.zeros((3, size, size))
        for c in range(3):
            for _ in range(int(rng.integers(2, 5))):
                freq = rng.uniform((), 0.02, 0.18)
                theta = rng.uniform((), 0, math.pi)
                phase = rng.uniform((), 0, 2 * math.pi)
                amp = rng.uniform((), 0.3, 1.0)
                base[c] += amp * np.sin(
                    2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            sigma = rng.uniform((), 0.8, 2.5)
            base[c] += 1.5 * ndimage.gaussian_filter(rng.normal((size, size)), sigma, mode="wrap")
        mix = np.eye(3) + 0.4 * rng.normal((3, 3))
        img = np.einsum("ij,jhw->ihw", mix, base)
        lo, hi = img.min(), img.max()
        out[k] = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-8)
    return torch.from_numpy(out).to(torch.float32)


def synthetic_pairs(n: int, size: int, scale: int, seed: int = 0) -> list[ImagePair]:
    hr = synthetic_textures(n, size, seed)
    return [make_pair(hr[i:i + 1], scale, f"synthetic:{seed}:{i}") for i in range(n)]


def sample_patches(pairs: list[ImagePair], hr_patch: int, batch: int, rng: nx.CounterRNG,
                   scale: int, augment: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Random aligned HR/LR crops with consistent random flips.

    Crop corners are multiples of ``scale`` so the LR crop starts at the HR
    corner divided by ``scale``.
    """
    if not pairs:
        raise HCFlowError("sample_patches: dataset is empty")
    if hr_patch % scale:
        raise ShapeError("sample_patches", "hr_patch", f"divisible by {scale}", hr_patch)
    lp = hr_patch // scale
    hrs, lrs = [], []
    for _ in range(batch):
        pair = pairs[int(rng.integers(0, len(pairs)))]
        h, w = pair.hr.shape[2], pair.hr.shape[3]
        if h < hr_patch or w < hr_patch:
            raise ShapeError("sample_patches", "image size", f">= {hr_patch}", (h, w))
        ty = int(rng.integers(0, (h - hr_patch) // scale + 1))
        tx = int(rng.integers(0, (w - hr_patch) // scale + 1))
        hr = pair.hr[:, :, ty * scale:ty * scale + hr_patch, tx * scale:tx * scale + hr_patch]
        lr = pair.lr[:, :, ty:ty + lp, tx:tx + lp]
        if augment:
            if rng.uniform(()) < 0.5:
                hr, lr = hr.flip(3), lr.flip(3)
            if rng.uniform(()) < 0.5:
                hr, lr = hr.flip(2), lr.flip(2)
        hrs.append(hr)
        lrs.append(lr)
    return torch.cat(hrs).contiguous(), torch.cat(lrs).contiguous()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _np(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().to(torch.float64).cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """PSNR in dB, saturated at 100 dB for (near-)identical inputs."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError("psnr", "shape", a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_SATURATION
    return min(PSNR_SATURATION, 10 * math.log10(data_range ** 2 / mse))


def rgb_to_y(t) -> np.ndarray:
    """BT.601 luma on the [16, 235] scale from RGB in [0, 1]; (B,3,H,W) -> (B,H,W)."""
    a = _np(t)
    if a.ndim != 4 or a.shape[1] != 3:
        raise ShapeError("rgb_to_y", "channels", 3, a.shape)
    return 65.481 * a[:, 0] + 128.553 * a[:, 1] + 24.966 * a[:, 2] + 16.0


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 255.0) -> float:
    """Single-channel SSIM, 11x11 Gaussian window (sigma 1.5), valid region."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError("ssim", "shape", a.shape, b.shape)
    if a.ndim != 2:
        raise ShapeError("ssim", "rank", 2, a.ndim)
    win = _gaussian_window()
    if min(a.shape) < win.shape[0]:
        raise ShapeError("ssim", "image size", f">= {win.shape[0]}", a.shape)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(v):
        return signal.convolve2d(v, win, mode="valid")

    mu1, mu2 = filt(a), filt(b)
    s11 = filt(a * a) - mu1 * mu1
    s22 = filt(b * b) - mu2 * mu2
    s12 = filt(a * b) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    return a[..., border:a.shape[-2] - border, border:a.shape[-1] - border] if border else a


def psnr_y(a, b, crop_border: int = 0) -> float:
    return psnr(_crop(rgb_to_y(a), crop_border), _crop(rgb_to_y(b), crop_border), 255.0)


def ssim_y(a, b, crop_border: int = 0) -> float:
    ya, yb = _crop(rgb_to_y(a), crop_border), _crop(rgb_to_y(b), crop_border)
    return float(np.mean([ssim(ya[i], yb[i]) for i in range(ya.shape[0])]))


@dataclass
class MetricReport:
    psnr_rgb: float
    psnr_y: float
    ssim: float | None
    consistency: float
    diversity: float
    lr_psnr: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1, sort_keys=True)

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".json").write_text(self.to_json() + "\n")


def diversity(samples: list[torch.Tensor]) -> float:
    """Mean over pixels of the per-pixel standard deviation across samples."""
    if len(samples) < 2:
        return 0.0
    stack = np.stack([_np(s) for s in samples])
    return float(stack.std(axis=0).mean())


def metrics(sr_samples: list[torch.Tensor], hr: torch.Tensor, lr: torch.Tensor,
            model_y: torch.Tensor | None = None, scale: int | None = None,
            crop_border: int | None = None) -> MetricReport:
    """Evaluate SR samples of one HR/LR pair (batches are averaged)."""
    if not sr_samples:
        raise ValueError("metrics needs at least one sample")
    for s in sr_samples:
        nx.same_shape(s, hr, "metrics")
    if scale is None:
        scale = hr.shape[2] // lr.shape[2]
    if hr.shape[2] != lr.shape[2] * scale or hr.shape[3] != lr.shape[3] * scale:
        raise ShapeError("metrics", "LR size", "HR size / scale", tuple(lr.shape))
    border = scale if crop_border is None else crop_border
    p_rgb, p_y, ss, cons = [], [], [], []
    for s in sr_samples:
        p_rgb.append(psnr(s.clamp(0, 1), hr))
        p_y.append(psnr_y(s.clamp(0, 1), hr, border))
        yh = hr.shape[2] - 2 * border
        ss.append(ssim_y(s.clamp(0, 1), hr, border) if yh >= 11 and hr.shape[3] - 2 * border >= 11 else None)
        cons.append(psnr(bicubic_resize(s, Fraction(1, scale)), lr))
    return MetricReport(
        psnr_rgb=float(np.mean(p_rgb)),
        psnr_y=float(np.mean(p_y)),
        ssim=None if None in ss else float(np.mean(ss)),
        consistency=float(np.mean(cons)),
        diversity=diversity(sr_samples),
        lr_psnr=None if model_y is None else psnr(model_y, lr),
    )
