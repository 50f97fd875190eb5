"""Minimal self-contained PNG output (8-bit grayscale, no filtering)."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + kind
        + payload
        + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF)
    )


def write_gray_png(path, image: np.ndarray) -> None:
    """Write a (H, W) uint8 array as an 8-bit grayscale PNG."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    img = img.astype(np.uint8, copy=False)
    h, w = img.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)  # bit depth 8, grayscale
    raw = b"".join(b"\x00" + img[row].tobytes() for row in range(h))
    idat = zlib.compress(raw, level=9)
    data = _SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")
    Path(path).write_bytes(data)


def png_dimensions(path) -> tuple[int, int]:
    """(height, width) parsed from a PNG's IHDR chunk."""
    raw = Path(path).read_bytes()
    if raw[:8] != _SIGNATURE or raw[12:16] != b"IHDR":
        raise ValueError("not a PNG file")
    w, h = struct.unpack(">II", raw[16:24])
    return h, w


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map data in [-1, 1] to uint8 [0, 255]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def rescale_full_range(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to [-1, 1] (used for distortion visibility panels)."""
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.zeros_like(arr)
    return 2.0 * (arr - lo) / (hi - lo) - 1.0
