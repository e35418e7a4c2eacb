"""Binary PGM (P5, maxval 255) reading and writing.

PGM is the only image format used anywhere: single-channel, byte-exact, no
codec dependencies.  Conversions between gray bytes and the [-1,1] float
images used by the networks live here too.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Malformed or unsupported PGM data."""


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise PgmError(f"PGM needs a 2-d array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise PgmError("pixel values outside [0,255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a [H,W] uint8 array.  Comments are tolerated."""
    blob = Path(path).read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            c = blob[pos : pos + 1]
            if c == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl == -1 else nl + 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        return blob[start:pos]

    if token() != b"P5":
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise PgmError(f"{path}: bad header field") from exc
    if maxval != 255:
        raise PgmError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte separating header from raster
    raster = blob[pos : pos + w * h]
    if len(raster) < w * h:
        raise PgmError(f"{path}: raster truncated ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def float_to_gray(image: np.ndarray) -> np.ndarray:
    """[-1,1] float image -> uint8 gray levels."""
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def gray_to_float(gray: np.ndarray) -> np.ndarray:
    """uint8 gray levels -> floats in [-1,1]."""
    return np.asarray(gray, dtype=np.float64) / 127.5 - 1.0


def edges_to_gray(edges: np.ndarray) -> np.ndarray:
    """Binary edge map -> 0/255 bytes."""
    return (np.asarray(edges) > 0).astype(np.uint8) * np.uint8(255)


def gray_to_edges(gray: np.ndarray) -> np.ndarray:
    return (np.asarray(gray) > 127).astype(np.uint8)
