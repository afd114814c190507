"""Binary tensor container.

One record per tensor::

    b"CPTS"              magic
    uint8                bytes per element (4 = float32, 8 = float64)
    uint32               rank
    uint64 * rank        extents
    payload              little-endian IEEE floats, row-major

A container file is a plain concatenation of records.  All header integers
are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

MAGIC = b"CPTS"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in _DTYPES:
        raise TypeError(f"snapshot supports float32/float64, got {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BI", arr.dtype.itemsize, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.itemsize]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    itemsize, rank = struct.unpack("<BI", fh.read(5))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = _DTYPES[itemsize]
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(count * itemsize)
    if len(payload) != count * itemsize:
        raise ValueError("truncated snapshot payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensors(path: str | Path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path: str | Path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        size = fh.seek(0, 2)
        fh.seek(0)
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out


def save_named(path: str | Path, arrays: Mapping[str, np.ndarray]) -> list[str]:
    """Write tensors in mapping order and return the name order for a manifest."""
    names = list(arrays)
    save_tensors(path, (arrays[n] for n in names))
    return names
