"""Binary checkpoint format for named parameter sets.

Layout (little-endian throughout):

    magic   4 bytes  b"ATCK"
    version u32      currently 1
    count   u32      number of parameters
    then per parameter, in the order given:
    name_len u16, name utf-8 bytes, ndim u8, dims u32 each,
    data float64 (C order)

Values are always stored as float64 regardless of in-memory dtype, so a
checkpoint round-trips training done in reduced precision without a
second format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"ATCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            end = off + 8 * n
            if end > len(buf):
                raise CheckpointError(f"{path}: truncated data for '{name}'")
            out[name] = np.frombuffer(buf[off:end], dtype="<f8").reshape(shape).copy()
            off = end
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header ({e})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def restore(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter set, checking shapes."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={missing}, extra={extra}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
