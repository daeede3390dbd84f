"""Grayscale export of per-class response maps as binary PGM (P5)."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, FormatError


def heatmap_u8(map2d: np.ndarray) -> np.ndarray:
    """Min-max normalize a spatial map to uint8; a constant map becomes 128."""
    if map2d.ndim != 2:
        raise DimensionError(f"heatmap expects h x w, got {tuple(map2d.shape)}")
    lo = float(map2d.min())
    hi = float(map2d.max())
    if hi == lo:
        return np.full(map2d.shape, 128, dtype=np.uint8)
    scaled = (map2d.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.rint(scaled).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 2:
        raise DimensionError("write_pgm expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Minimal P5 reader (used by tests)."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM file", offset=0)
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError("unsupported PGM maxval")
    pixels = np.frombuffer(parts[3][: h * w], dtype=np.uint8)
    if pixels.size != h * w:
        raise FormatError("truncated PGM payload", offset=len(data))
    return pixels.reshape(h, w)
