"""SFCK checkpoint format.

Layout: magic "SFCK", u32 version, u64 config hash, u64 step, u32 tensor
count, then per-tensor records (u32 name length + bytes, u32 rank, u32
extents, little-endian f32 payload), and a trailing CRC32 over everything
before it.

Payloads are 32-bit. To keep resumed training bitwise identical to an
uninterrupted run, ``quantize_inplace`` rounds the live float64 state through
float32 at every save point, so the saver and the running process agree on
the exact values from then on.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"SFCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def quantize_inplace(params: dict[str, Tensor], state: AdamWState | None = None) -> None:
    """Round parameters (and optimizer moments) through f32 precision."""
    for t in params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)
    if state is not None:
        for bank in (state.m, state.v):
            for k in bank:
                bank[k] = bank[k].astype(np.float32).astype(np.float64)


def _named_tensors(params: dict[str, Tensor], state: AdamWState | None):
    named = {k: t.data for k, t in params.items()}
    if state is not None:
        named.update({f"adam.m.{k}": v for k, v in state.m.items()})
        named.update({f"adam.v.{k}": v for k, v in state.v.items()})
    return named


def save_checkpoint(path: str | Path, params: dict[str, Tensor], step: int,
                    config_hash: int, state: AdamWState | None = None) -> None:
    named = _named_tensors(params, state)
    parts = [MAGIC, struct.pack("<IQQI", VERSION, config_hash, step, len(named))]
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int, int]:
    """Returns (tensors as float64, step, config hash)."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"checksum failure in {path}")
    version, cfg_hash, step, count = struct.unpack("<IQQI", data[4:28])
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file {version}, reader {VERSION}")
    off = 28
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", data[off : off + 4])
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack("<I", data[off : off + 4])
        off += 4
        shape = struct.unpack(f"<{rank}I", data[off : off + 4 * rank])
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data[off : off + 4 * size], dtype="<f4").reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(np.float64)
    if off != len(data) - 4:
        raise CheckpointError("trailing bytes inside checkpoint")
    return tensors, int(step), int(cfg_hash)


def restore_into(tensors: dict[str, np.ndarray], params: dict[str, Tensor],
                 state: AdamWState) -> None:
    """Load checkpoint tensors into live parameter and moment banks."""
    for k, t in params.items():
        if k not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {k!r}")
        if tensors[k].shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {k!r}")
        t.data = tensors[k].copy()
    for k in params:
        state.m[k] = tensors[f"adam.m.{k}"].copy()
        state.v[k] = tensors[f"adam.v.{k}"].copy()
