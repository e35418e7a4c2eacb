"""Flat binary checkpoint format for named float64 arrays.

Layout: magic ``EUDA``, format version (u32), then for each array a u32 name
length, the UTF-8 name, a u32 rank, the dims as u32 each, and the raw
little-endian float64 payload.  Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"EUDA"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_arrays(path, arrays) -> None:
    """Write an ordered mapping of name -> ndarray to ``path``."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> float64 array map."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 8
    total = len(blob)
    while pos < total:
        pos, name_len = _read_u32(blob, pos, path)
        if pos + name_len > total:
            raise CheckpointError(f"{path}: truncated name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        pos, rank = _read_u32(blob, pos, path)
        dims = []
        for _ in range(rank):
            pos, d = _read_u32(blob, pos, path)
            dims.append(d)
        count = 1
        for d in dims:
            count *= d
        nbytes = count * 8
        if pos + nbytes > total:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        out[name] = arr.astype(np.float64)  # own, writable copy in native order
        pos += nbytes
    return out


def _read_u32(blob: bytes, pos: int, path) -> tuple[int, int]:
    if pos + 4 > len(blob):
        raise CheckpointError(f"{path}: truncated header field")
    (value,) = struct.unpack_from("<I", blob, pos)
    return pos + 4, value
