"""GVT1 binary tensor format.

Layout: magic ``GVT1``, little-endian u32 rank, u32 dims[rank], then
little-endian float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GVT1"


class TensorFormatError(ValueError):
    pass


def dumps_tensor(array) -> bytes:
    arr = np.array(array, dtype="<f8", order="C")  # keeps rank 0
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def loads_tensor(buf: bytes, source="<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic, not a GVT1 tensor")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != head + 8 * count:
        raise TensorFormatError(
            f"{source}: truncated or oversized payload "
            f"(expected {head + 8 * count} bytes, got {len(buf)})")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=head)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(dumps_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing tensor file: {path}") from None
    return loads_tensor(buf, source=str(path))
