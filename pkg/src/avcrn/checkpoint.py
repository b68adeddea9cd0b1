"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    magic      8 bytes  b"AVCRNCK\\0"
    version    uint32
    meta_len   uint32
    meta       meta_len bytes of UTF-8 JSON (sorted keys): model config,
               parameter dtype, training step, optimiser step, RNG state
    n_tensors  uint32
    n_tensors times:
        name_len uint32, name (UTF-8), rank uint32, rank x uint32 extents,
        prod(extents) float64 values, row-major
    crc32      uint32 over every preceding byte

Tensor names: model parameters use their dotted attribute path
(``enc.0.weight``); ``norm.mean``/``norm.std`` hold input normalisation;
``adam.m.<name>``/``adam.v.<name>`` hold optimiser moments.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import AVCRN, ModelConfig

MAGIC = b"AVCRNCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: AVCRN
    step: int = 0
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ckpt: Checkpoint | AVCRN) -> bytes:
    if isinstance(ckpt, AVCRN):
        ckpt = Checkpoint(ckpt)
    model = ckpt.model
    params = list(model.named_parameters())
    meta = {
        "config": model.config.to_dict(),
        "dtype": str(params[0][1].dtype),
        "step": int(ckpt.step),
        "adam_t": int(ckpt.adam_t),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = [(name, p.data) for name, p in params]
    tensors += [("norm.mean", model.norm_mean), ("norm.std", model.norm_std)]
    tensors += [(f"adam.m.{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam.v.{k}", v) for k, v in ckpt.adam_v.items()]
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(meta_raw)) + meta_raw
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _pack_tensor(name, arr)
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(buf: bytes) -> Checkpoint:
    """Parse bytes from :func:`save_checkpoint`; raises :class:`CheckpointError` on any defect."""
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an AVCRN checkpoint (bad magic)")
    if struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated)")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after tensor table")

    model = AVCRN(ModelConfig.from_dict(meta["config"]))
    dtype = np.dtype(meta["dtype"])
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {tensors[name].shape} != {p.shape}")
        p.data = tensors[name].astype(dtype)
    model.norm_mean = tensors["norm.mean"]
    model.norm_std = tensors["norm.std"]
    adam_m = {k[7:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("adam.m.")}
    adam_v = {k[7:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("adam.v.")}
    return Checkpoint(model, step=meta["step"], adam_t=meta["adam_t"], adam_m=adam_m,
                      adam_v=adam_v, rng_state=meta["rng_state"], extra=meta.get("extra", {}))


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path.read_bytes())
