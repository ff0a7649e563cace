"""Reader/writer for the IDX byte format used by classic image datasets.

Layout: a 4-byte big-endian magic word, one 4-byte big-endian size per
dimension, then the payload as unsigned bytes in row-major order.  Only the
two unsigned-byte magics are supported: 0x00000803 (images, 3 dimensions)
and 0x00000801 (labels, 1 dimension).
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC_IMAGES = 0x00000803
MAGIC_LABELS = 0x00000801

# Guard against absurd headers before attempting a huge allocation.
MAX_ELEMENTS = 1 << 32

__all__ = [
    "MAGIC_IMAGES",
    "MAGIC_LABELS",
    "IdxFormatError",
    "WrongMagic",
    "TruncatedPayload",
    "DimensionOverflow",
    "parse_idx",
    "serialize_idx",
]


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class WrongMagic(IdxFormatError):
    pass


class TruncatedPayload(IdxFormatError):
    pass


class DimensionOverflow(IdxFormatError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode IDX bytes into a uint8 array (3-d for images, 1-d for labels)."""
    if len(data) < 4:
        raise TruncatedPayload("missing magic word")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == MAGIC_IMAGES:
        ndim = 3
    elif magic == MAGIC_LABELS:
        ndim = 1
    else:
        raise WrongMagic(f"unsupported magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedPayload("header ends before all dimension sizes")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimensionOverflow(f"dimensions {dims} overflow the element limit")
    payload = data[header_len:]
    if len(payload) < count:
        raise TruncatedPayload(f"expected {count} payload bytes, found {len(payload)}")
    if len(payload) > count:
        raise TruncatedPayload(f"{len(payload) - count} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    """Encode a uint8 array back into IDX bytes; inverse of parse_idx."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX payloads are unsigned bytes")
    if arr.ndim == 3:
        magic = MAGIC_IMAGES
    elif arr.ndim == 1:
        magic = MAGIC_LABELS
    else:
        raise ValueError("only 1-d label and 3-d image arrays are supported")
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    return header + arr.tobytes(order="C")
