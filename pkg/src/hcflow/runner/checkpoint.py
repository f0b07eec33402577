"""Binary tensor archive used for checkpoints and latent files.

Layout (all integers little-endian)::

    b"HCFL"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dim,
              prod(dims) x float32 (little-endian, row-major) }
    u64 step  u32 text_len  text (UTF-8 ``key = value`` config)

Adam moments are stored as ordinary records under the ``adam/`` prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError
from ..model import HCFlow
from .config import config_from_text, model_config_from_pairs, parse_pairs

MAGIC = b"HCFL"
VERSION = 1


@dataclass
class Archive:
    tensors: dict[str, torch.Tensor]
    step: int = 0
    text: str = ""
    version: int = VERSION

    def model_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam/")}

    def adam_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("adam/")}


def write_archive(path, tensors: dict[str, torch.Tensor], step: int = 0, text: str = "") -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, t in tensors.items():
        raw_name = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        buf += struct.pack("<H", len(raw_name)) + raw_name
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4", copy=False).tobytes()
    raw_text = text.encode("utf-8")
    buf += struct.pack("<QI", step, len(raw_text)) + raw_text
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_archive(path) -> Archive:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt parameter name") from exc
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    step, text_len = r.unpack("<QI")
    text = r.take(text_len).decode("utf-8")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Archive(tensors, step, text, version)


def save_checkpoint(model: HCFlow, path, optimizer=None, step: int = 0, train_config=None) -> None:
    tensors = {name: p for name, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    if train_config is not None:
        text = train_config.to_text()
    else:
        text = "".join(f"{k} = {_plain(v)}\n" for k, v in model.config.to_dict().items())
    write_archive(path, tensors, step, text)


def _plain(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@torch.no_grad()
def load_into(model: HCFlow, archive: Archive, path="checkpoint") -> None:
    """Copy archive parameters into ``model``; names and shapes must agree."""
    stored = archive.model_tensors()
    for name, p in model.named_parameters():
        if name not in stored:
            raise CheckpointError(f"{path}: shape conflict: parameter {name!r} missing from checkpoint")
        t = stored[name]
        if tuple(t.shape) != tuple(p.shape):
            raise CheckpointError(
                f"{path}: shape conflict at parameter {name!r}: "
                f"checkpoint {tuple(t.shape)} vs model {tuple(p.shape)}")
    own = {n for n, _ in model.named_parameters()}
    extra = sorted(set(stored) - own)
    if extra:
        raise CheckpointError(f"{path}: shape conflict: unexpected parameter {extra[0]!r}")
    for name, p in model.named_parameters():
        p.copy_(stored[name].to(p.dtype))


def load_checkpoint(path, model: HCFlow | None = None):
    """Load a checkpoint.

    With ``model`` given, its parameters are overwritten (after a full
    name/shape check). Otherwise a model is rebuilt from the stored config.
    Returns ``(model, archive)``.
    """
    archive = read_archive(path)
    if model is None:
        model = HCFlow(model_config_from_pairs(parse_pairs(archive.text)))
    load_into(model, archive, path)
    return model, archive


def train_config_of(archive: Archive):
    return config_from_text(archive.text)
