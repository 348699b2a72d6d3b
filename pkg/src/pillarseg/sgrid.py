"""SGRID container for top-view and voxel grids.

Layout (little-endian): ``b"SGRD"``, ``u8`` version (1), ``u8`` dtype
(0 = uint8 class ids, 1 = float32, 2 = uint32 counts), ``u8`` flags,
``u8`` reserved, ``u32`` W, H, Z, then the payload with linear index
``(k * H + j) * W + i``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import atomic_write_bytes
from .errors import SgridFormatError

MAGIC = b"SGRD"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBIII")
DTYPE_U8, DTYPE_F32, DTYPE_U32 = 0, 1, 2
_DTYPES = {DTYPE_U8: np.dtype("u1"), DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}


@dataclass(eq=False)
class SgridFile:
    """A ``(W, H, Z)`` grid; 2D grids have ``Z == 1``."""

    data: np.ndarray
    dtype: int
    flags: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def grid2d(self) -> np.ndarray:
        if self.data.shape[2] != 1:
            raise SgridFormatError(f"grid has {self.data.shape[2]} layers, expected one")
        return self.data[:, :, 0]


def make_sgrid(array, dtype: int, flags: int = 0) -> SgridFile:
    """Wrap a ``(W, H)`` or ``(W, H, Z)`` array, converting it to the storage dtype."""
    if dtype not in _DTYPES:
        raise SgridFormatError(f"unknown SGRID dtype {dtype}")
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise SgridFormatError(f"SGRID holds 2D or 3D grids, got shape {a.shape}")
    target = _DTYPES[dtype]
    if dtype != DTYPE_F32:
        if a.size and (not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > np.iinfo(target).max or np.any(a != np.round(a))):
            raise SgridFormatError(f"values do not fit {target}")
    return SgridFile(a.astype(target), dtype, flags)


def encode_sgrid(grid: SgridFile) -> bytes:
    W, H, Z = grid.data.shape
    if not 0 <= grid.flags <= 255:
        raise SgridFormatError("flags must fit in one byte")
    header = _HEADER.pack(MAGIC, VERSION, grid.dtype, grid.flags, 0, W, H, Z)
    payload = np.ascontiguousarray(grid.data.astype(_DTYPES[grid.dtype]).transpose(2, 1, 0)).tobytes()
    return header + payload


def decode_sgrid(data: bytes) -> SgridFile:
    if len(data) < _HEADER.size:
        raise SgridFormatError(f"SGRID header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, dtype, flags, _reserved, W, H, Z = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SgridFormatError(f"bad SGRID magic {magic!r}")
    if version != VERSION:
        raise SgridFormatError(f"unsupported SGRID version {version}")
    if dtype not in _DTYPES:
        raise SgridFormatError(f"unknown SGRID dtype {dtype}")
    dt = _DTYPES[dtype]
    expected = W * H * Z * dt.itemsize
    payload = data[_HEADER.size :]
    if len(payload) != expected:
        raise SgridFormatError(f"SGRID payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(Z, H, W).transpose(2, 1, 0).copy()
    return SgridFile(arr, dtype, flags)


def write_sgrid(path, grid: SgridFile) -> None:
    atomic_write_bytes(Path(path), encode_sgrid(grid))


def read_sgrid(path) -> SgridFile:
    return decode_sgrid(Path(path).read_bytes())
