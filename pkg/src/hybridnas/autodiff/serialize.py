"""TNS1 binary tensor files.

Layout (little-endian): magic ``b"TNS1"``, u8 dtype tag (0 = f32, 1 = f64),
u8 rank, one u64 per dim, then the raw element data in C order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import ValidationError

MAGIC = b"TNS1"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise ValidationError(f"TNS1 stores float32/float64 only, got {arr.dtype}")
    tag = _TAGS[arr.dtype]
    head = MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValidationError("not a TNS1 tensor (bad magic)")
    tag, rank = struct.unpack_from("<BB", buf, 4)
    if tag not in _DTYPES:
        raise ValidationError(f"unknown TNS1 dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    start = 6 + 8 * rank
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - start != count * dtype.itemsize:
        raise ValidationError(f"TNS1 payload size mismatch for shape {dims}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
