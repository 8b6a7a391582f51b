"""IDX ingestion and the compact on-disk dataset format used by the CLI."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_DSET_MAGIC = b"LXD1"


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload (images or labels)."""
    if len(raw) < 4:
        raise ParseError("missing IDX magic number", offset=len(raw) if raw else 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise ParseError(f"truncated IDX payload: need {size} bytes", offset=len(raw))
    if len(raw) > header + size:
        raise ParseError("trailing bytes after IDX payload", offset=header + size)
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=size).reshape(dims)


@dataclass
class Dataset:
    pixels: np.ndarray  # uint8, (count, rows * cols)
    labels: np.ndarray  # uint8, (count,)
    rows: int
    cols: int

    @property
    def images(self) -> np.ndarray:
        """Intensities scaled to [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], self.labels[idx], self.rows, self.cols)

    def save(self, path) -> None:
        head = _DSET_MAGIC + struct.pack("<III", len(self), self.rows, self.cols)
        Path(path).write_bytes(head + self.pixels.tobytes() + self.labels.tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:4] != _DSET_MAGIC:
            raise ParseError("not a dataset file", offset=0)
        count, rows, cols = struct.unpack("<III", raw[4:16])
        n = rows * cols
        need = 16 + count * n + count
        if len(raw) != need:
            raise ParseError("dataset file has the wrong length", offset=min(len(raw), need))
        pixels = np.frombuffer(raw, np.uint8, count * n, 16).reshape(count, n)
        labels = np.frombuffer(raw, np.uint8, count, 16 + count * n)
        return cls(pixels.copy(), labels.copy(), rows, cols)


def load_idx(images_path, labels_path) -> Dataset:
    imgs = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if imgs.ndim != 3:
        raise ParseError(f"expected 3-D image tensor, got {imgs.ndim}-D", offset=3)
    if len(labels) != len(imgs):
        raise ParseError(f"{len(imgs)} images but {len(labels)} labels", offset=4)
    count, rows, cols = imgs.shape
    return Dataset(imgs.reshape(count, rows * cols).copy(), labels.copy(), rows, cols)


def write_idx_images(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, *pixels.shape) + pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def split_indices(count: int, fractions, seed: int) -> list[np.ndarray]:
    """Seeded shuffle cut into consecutive chunks of the given fractions (shuffled order kept)."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError("fractions must be non-negative and sum to at most 1")
    order = np.random.default_rng(seed).permutation(count)
    cuts = np.floor(np.cumsum(fractions) * count + 1e-9).astype(int)
    out, start = [], 0
    for stop in cuts:
        out.append(order[start:stop])
        start = stop
    return out
