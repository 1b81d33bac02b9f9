"""Bit-exact binary container for dense numeric arrays (`.bvt` files).

Layout, all little-endian:

    magic   4 bytes   ``B V S T``
    version u32       always 1
    dtype   u32       0 = f32, 1 = f64
    ndim    u32       1..4
    dims    ndim*u64  outermost first
    payload row-major scalars

No compression, no padding; bytes produced on any platform parse
identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"BVST"
VERSION = 1

_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {0: "f32", 1: "f64"}
_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Malformed `.bvt` stream; the message names the offending field."""


class TensorSinkError(IOError):
    """Write failure; carries the byte offset reached before the error."""

    def __init__(self, offset: int, cause: Exception):
        super().__init__(f"sink failure at byte offset {offset}: {cause}")
        self.offset = offset


@dataclass(frozen=True)
class TensorContainer:
    """A dense 1-4 dimensional array with explicit dtype and shape."""

    dtype: str
    shape: tuple[int, ...]
    values: np.ndarray  # flat, row-major, native float32/float64

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise TensorFormatError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if not 1 <= len(self.shape) <= 4:
            raise TensorFormatError(f"shape must have 1-4 dimensions, got {self.shape}")
        if any(d < 1 for d in self.shape):
            raise TensorFormatError(f"every dimension must be >= 1, got {self.shape}")
        n = int(np.prod(self.shape))
        if self.values.size != n:
            raise TensorFormatError(
                f"payload has {self.values.size} scalars, shape {self.shape} needs {n}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TensorContainer":
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            dtype = "f32"
        elif arr.dtype == np.float64:
            dtype = "f64"
        else:
            raise TensorFormatError(f"unsupported array dtype {arr.dtype}; use float32/float64")
        return cls(dtype, tuple(int(d) for d in arr.shape), np.ascontiguousarray(arr).reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorContainer):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def write_tensor(t: TensorContainer, sink: BinaryIO) -> int:
    """Write a container to a binary sink. Returns total bytes written."""
    header = MAGIC + struct.pack("<III", VERSION, _DTYPE_CODES[t.dtype], len(t.shape))
    header += struct.pack(f"<{len(t.shape)}Q", *t.shape)
    payload = np.ascontiguousarray(t.values, dtype=_NUMPY_DTYPES[t.dtype]).tobytes()
    written = 0
    for chunk in (header, payload):
        try:
            sink.write(chunk)
        except OSError as exc:
            raise TensorSinkError(written, exc) from exc
        written += len(chunk)
    return written


def read_tensor(source: BinaryIO) -> TensorContainer:
    """Read one container, consuming exactly header + payload bytes."""
    magic = source.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = source.read(12)
    if len(head) < 12:
        raise TensorFormatError("truncated header")
    version, code, ndim = struct.unpack("<III", head)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"ndim must be 1-4, got {ndim}")
    dims_raw = source.read(8 * ndim)
    if len(dims_raw) < 8 * ndim:
        raise TensorFormatError("truncated dims")
    shape = struct.unpack(f"<{ndim}Q", dims_raw)
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"every dimension must be >= 1, got {shape}")
    dtype = _CODE_DTYPES[code]
    width = _NUMPY_DTYPES[dtype].itemsize
    n = 1
    for d in shape:
        n *= d
    payload = source.read(n * width)
    if len(payload) < n * width:
        raise TensorFormatError(
            f"truncated payload: expected {n * width} bytes, got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype=_NUMPY_DTYPES[dtype]).astype(
        np.float32 if dtype == "f32" else np.float64, copy=False
    )
    return TensorContainer(dtype, tuple(int(d) for d in shape), values)


def save_tensor(path: str | Path, arr: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_tensor(TensorContainer.from_array(arr), f)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f).to_array()
