"""Named-tensor container files.

Layout: the magic string ``TFRX1``, then one record per tensor in
insertion order: name length (u64 LE), UTF-8 name bytes, rank (u64 LE),
the dims (u64 LE each), and the payload as little-endian IEEE-754 32-bit
floats in row-major order.  Writes are atomic (temp file then rename).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"TFRX1"


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            name_bytes = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<Q", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<Q", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = 1
            for dim in shape:
                count *= dim
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            tensors[name] = arr.astype(np.float32)
    return tensors
