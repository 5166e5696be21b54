"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"NVCK" | u32 format_version | u32 header_len | header JSON (utf-8)
    u32 n_tensors
    repeated: u16 name_len | name | u8 ndim | ndim * u32 extents | float32 data (C order)

The header carries the architecture config, the train-config digest and the
epoch. Batch-norm running statistics are stored as tensors named
``buffer:<layer>.mean`` / ``buffer:<layer>.var``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes
from .architecture import ArchitectureConfig, VAEModel

MAGIC = b"NVCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the requested architecture."""


@dataclass
class Checkpoint:
    architecture: ArchitectureConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    train_config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "architecture": self.architecture.to_dict(),
            "architecture_digest": self.architecture.digest(),
            "train_config_digest": self.train_config_digest,
            "epoch": self.epoch,
            **self.extra,
        }


def model_tensors(model: VAEModel) -> dict[str, np.ndarray]:
    out = {n: t.data for n, t in model.store.params.items()}
    for layer, bufs in model.store.buffers.items():
        for stat, arr in bufs.items():
            out[f"buffer:{layer}.{stat}"] = arr
    return out


def checkpoint_from_model(model: VAEModel, epoch: int = 0, train_config_digest: str = "",
                          **extra) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float32) for k, v in model_tensors(model).items()}
    return Checkpoint(model.config, tensors, epoch, train_config_digest, dict(extra))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if payload[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", payload, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported format version {version}")
        pos = 12
        header = json.loads(payload[pos:pos + hlen])
        pos += hlen
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", payload, pos)
            pos += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            tensors[name] = np.frombuffer(payload, "<f4", count, pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
    if pos != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - pos} trailing bytes")
    arch = ArchitectureConfig.from_dict(header.pop("architecture"))
    header.pop("format_version", None)
    header.pop("architecture_digest", None)
    epoch = header.pop("epoch", 0)
    tdig = header.pop("train_config_digest", "")
    return Checkpoint(arch, tensors, epoch, tdig, header)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def load_into(model: VAEModel, ckpt: Checkpoint) -> VAEModel:
    """Copy checkpoint tensors into ``model``; architecture digests must match."""
    if model.config.digest() != ckpt.architecture.digest():
        raise CheckpointError(
            f"architecture mismatch: model {model.config.digest()} vs checkpoint "
            f"{ckpt.architecture.digest()}")
    for name, arr in model_tensors(model).items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if ckpt.tensors[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: shape {ckpt.tensors[name].shape} != {arr.shape}")
        arr[...] = ckpt.tensors[name]
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> VAEModel:
    return load_into(VAEModel(ckpt.architecture, seed=0), ckpt)
