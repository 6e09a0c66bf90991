"""Reader for the big-endian IDX image/label container."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import DatasetShard
from .errors import BadMagic, CountMismatch, TruncatedFile

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path} is shorter than the magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise TruncatedFile(f"{path} ends inside the dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    need = int(np.prod(dims))
    body = data[head:]
    if len(body) < need:
        raise TruncatedFile(f"{path} holds {len(body)} payload bytes, header promises {need}")
    return dims, body[:need]


def read_idx_images(path: str | Path) -> np.ndarray:
    """``(count, rows * cols)`` float array with pixels scaled to [0, 1]."""
    (count, rows, cols), body = _read(Path(path), IMAGES_MAGIC, 3)
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0


def read_idx_labels(path: str | Path) -> np.ndarray:
    (count,), body = _read(Path(path), LABELS_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> DatasetShard:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if len(x) != len(y):
        raise CountMismatch(f"{len(x)} images but {len(y)} labels")
    return DatasetShard(x, y)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Encode uint8 images ``(count, rows, cols)`` and labels; used for fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())
