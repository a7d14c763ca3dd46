"""``weights.bin``: a flat little-endian container of named float32 tensors.

Layout::

    magic   4 bytes  b"AVFW"
    version u32
    count   u32
    then per tensor:
      name_len u32, name utf-8, rank u32, dims u32 * rank, payload float32 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVFW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_weights(named, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(named))
    for name, value in named.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_weights(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            nbytes = 4 * size
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += nbytes
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated header") from err
    return out
