"""Named-tensor archive with a bit-exact binary format.

Layout, little-endian throughout:

    magic   4 bytes  b"SWL2"
    version u32      1
    count   u32      number of tensors
    per tensor:
        name_len u16, then name_len bytes of UTF-8
        rank     u8
        extents  rank x u64
        payload  product(extents) x f64, row-major

Round-tripping any mapping of float64 arrays reproduces every byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"SWL2"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks: list[bytes] = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # ascontiguousarray would promote rank-0 to rank-1; asarray keeps the
        # shape, and 0-d arrays are always contiguous already.
        arr = np.asarray(arr, dtype="<f8")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ConfigError(f"tensor name too long ({len(nb)} bytes)")
        if arr.ndim > 0xFF:
            raise ConfigError(f"tensor rank {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise ConfigError(f"truncated checkpoint: {path}")
        out = buf[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise ConfigError(f"bad magic in {path}; not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        numel = 1
        for e in shape:
            numel *= e
        arr = np.frombuffer(take(8 * numel), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    if off != len(buf):
        raise ConfigError(f"trailing bytes in checkpoint {path}")
    return out
