"""PSNC checkpoint container.

Layout (little-endian)::

    b"PSNC" | u8 version | u32 record count
    per record: u16 name length | utf-8 name | u8 ndim | u32 dims[ndim] | f64 values
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"PSNC"
VERSION = 1


def encode_checkpoint(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not a PSNC checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", data, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        off = 9
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(data):
                raise CheckpointFormatError(f"record {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
            off += 8 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointFormatError(f"{len(data) - off} trailing bytes after last record")
    return out
