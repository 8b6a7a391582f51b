"""Binary PGM (P5, maxval 255) and saliency CSV writers."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import ParseError

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_bytes(image) -> np.ndarray:
    """[0, 1] intensities to uint8 by rounding, clipped."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(images) -> np.ndarray:
    """Snap [0, 1] intensities to the 8-bit grid that PGM files store."""
    return to_bytes(images).astype(np.float64) / 255.0


def encode_pgm(image, rows: int, cols: int) -> bytes:
    pixels = to_bytes(image).reshape(rows, cols)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    """uint8 array of shape (rows, cols)."""
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ParseError("not a binary PGM header", offset=0)
    cols, rows, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", offset=m.start(3))
    body = raw[m.end():]
    if len(body) != rows * cols:
        raise ParseError(f"PGM body has {len(body)} bytes, expected {rows * cols}", offset=m.end() + min(len(body), rows * cols))
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def write_pgm(path, image, rows: int, cols: int) -> None:
    Path(path).write_bytes(encode_pgm(image, rows, cols))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def bands_image(bands) -> np.ndarray:
    """Three-band saliency rendering: -1 -> black, 0 (essential) -> gray, +1 -> white."""
    return (np.asarray(bands, dtype=np.float64) + 1.0) / 2.0


def saliency_csv(s, cols: int) -> str:
    """One value per pixel, row-major, ``cols`` values per line."""
    s = np.asarray(s, dtype=np.float64).reshape(-1, cols)
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in s)


def parse_saliency_csv(text: str) -> np.ndarray:
    return np.array([float(v) for line in text.splitlines() if line for v in line.split(",")])
