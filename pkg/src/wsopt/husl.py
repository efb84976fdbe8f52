"""HUSL slice file format.

Binary layout (everything little-endian):

    bytes 0..3   magic b"HUSL"
    bytes 4..5   u16 version, currently 1
    bytes 6..9   u32 width  (columns)
    bytes 10..13 u32 height (rows)
    then         width * height signed 16-bit HU values, row-major

Values are HU in [-1024, 1024]; out-of-range values are clamped on read with
a logged count rather than rejected.
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from .windowing import clamp_hu_range

log = logging.getLogger(__name__)

MAGIC = b"HUSL"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


class HuslError(ValueError):
    """Malformed HUSL file."""


def write_husl(path, pixels: np.ndarray) -> None:
    """Write a 2-D int16 HU grid. Float inputs are rounded to nearest."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D slice, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        arr = np.rint(arr)
    arr = arr.astype("<i2")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, width, height))
        fh.write(arr.tobytes(order="C"))


def read_husl(path) -> np.ndarray:
    """Read a HUSL file as an int16 array of shape (height, width)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise HuslError(f"{path}: truncated header")
        magic, version, width, height = _HEADER.unpack(head)
        if magic != MAGIC:
            raise HuslError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise HuslError(f"{path}: unsupported version {version}")
        payload = fh.read(2 * width * height)
        if len(payload) != 2 * width * height:
            raise HuslError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype="<i2").reshape(height, width).astype(np.int16)


def read_hu(path) -> np.ndarray:
    """Read a slice as float64 HU, clamped to the recorded range."""
    raw = read_husl(path).astype(np.float64)
    clamped, n_out = clamp_hu_range(raw)
    if n_out:
        log.warning("%s: clamped %d out-of-range HU values", path, n_out)
    return clamped
