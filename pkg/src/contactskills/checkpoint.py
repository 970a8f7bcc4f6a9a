"""Flat named-tensor archive with bit-exact round trips.

Layout: header line ``TSK1``; then per tensor: u32 name length, utf-8 name,
u32 rank, u32 extents, raw little-endian float32 data. All integers are
little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TSK1\n"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write a {name: float32 array} mapping. Order is sorted by name."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    tensors = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a TSK1 checkpoint")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            if data.size != count:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = data.copy()
    return tensors
