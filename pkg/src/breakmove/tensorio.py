"""Little-endian tensor blocks.

Block layout::

    magic (4 bytes) | u32 rows | u32 num_sub | u32 cols | payload

``EMB1`` blocks carry float32 payloads (embeddings), ``EMB8`` blocks carry
float64 payloads (checkpoints). The payload is ``rows * num_sub * cols``
values in row-major order.
"""

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import BadMagic, CorruptFile, MissingFile

MAGIC_F32 = b"EMB1"
MAGIC_F64 = b"EMB8"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIII")


def write_block(fh: BinaryIO, array: np.ndarray, magic: bytes = MAGIC_F32) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        rows, cols = arr.shape
        num_sub = 1
    elif arr.ndim == 3:
        rows, num_sub, cols = arr.shape
    else:
        raise ValueError(f"expected a 2D or 3D array, got shape {arr.shape}")
    dtype = _DTYPES[magic]
    fh.write(_HEADER.pack(magic, rows, num_sub, cols))
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_block(fh: BinaryIO, magic: bytes = MAGIC_F32, source: str = "<stream>") -> np.ndarray:
    """Read one block; returns shape (rows, num_sub, cols)."""
    head = fh.read(_HEADER.size)
    if len(head) < 4 or head[:4] != magic:
        raise BadMagic(f"{source}: expected magic {magic!r}, found {head[:4]!r}")
    if len(head) != _HEADER.size:
        raise CorruptFile(f"{source}: truncated header")
    _, rows, num_sub, cols = _HEADER.unpack(head)
    dtype = _DTYPES[magic]
    count = rows * num_sub * cols
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise CorruptFile(
            f"{source}: payload has {len(payload)} bytes, header implies {count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(rows, num_sub, cols)


def save_embeddings(path, rows: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_block(fh, rows, MAGIC_F32)


def load_embeddings(path) -> np.ndarray:
    """Load an ``EMB1`` file as a (rows, num_sub, cols) float32 array."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        arr = read_block(fh, MAGIC_F32, source=str(path))
        if fh.read(1):
            raise CorruptFile(f"{path}: trailing bytes after payload")
    return arr
