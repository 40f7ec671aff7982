"""Dataset ingestion: IDX files, a synthetic digit-like set, and input padding."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetError(RuntimeError):
    """Base class for dataset problems."""


class BadMagic(DatasetError):
    pass


class Truncated(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, rows, cols), float in [0, 1]
    labels: np.ndarray  # (n,), int64

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse(raw: bytes, path: str, magic: int, n_dims: int) -> tuple[tuple[int, ...], bytes]:
    head = 4 + 4 * n_dims
    if len(raw) < 4:
        raise Truncated(f"{path}: truncated header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < head:
        raise Truncated(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(">" + "I" * n_dims, raw[4:head])
    need = int(np.prod(dims))
    body = raw[head:]
    if len(body) < need:
        raise Truncated(f"{path}: truncated payload, {len(body)} of {need} bytes present")
    return dims, body[:need]


def read_idx_images(path: str) -> np.ndarray:
    (n, rows, cols), body = _parse(_read_bytes(path), path, IMAGE_MAGIC, 3)
    pix = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, rows, cols)
    return pix.astype(np.float64) / 255.0


def read_idx_labels(path: str) -> np.ndarray:
    (n,), body = _parse(_read_bytes(path), path, LABEL_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def ingest_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label file pair (optionally gzipped) into a :class:`Dataset`."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise DatasetError(f"{p}: file not found")
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images, labels)


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise DatasetError(f"{directory}: no file matching {stem}[.gz]")


def load_mnist(directory: str) -> tuple[Dataset, Dataset]:
    """Load the standard four MNIST files from ``directory``."""
    train = ingest_idx(_find(directory, "train-images-idx3-ubyte"),
                       _find(directory, "train-labels-idx1-ubyte"))
    test = ingest_idx(_find(directory, "t10k-images-idx3-ubyte"),
                      _find(directory, "t10k-labels-idx1-ubyte"))
    return train, test


def write_idx(path: str, array: np.ndarray, magic: int) -> None:
    """Write unsigned-byte IDX data (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def synthetic_dataset(n: int, n_classes: int = 10, seed: int = 0, size: int = 28,
                      noise: float = 0.15) -> Dataset:
    """Noisy copies of one random blob prototype per class; learnable in a few steps."""
    rng = np.random.default_rng(seed)
    protos = (rng.uniform(size=(n_classes, size, size)) > 0.7).astype(np.float64)
    labels = rng.integers(0, n_classes, size=n)
    imgs = protos[labels] + noise * rng.standard_normal((n, size, size))
    return Dataset(np.clip(imgs, 0.0, 1.0)[:, None], labels.astype(np.int64))


def pad_images(images: np.ndarray, target: int = 32) -> np.ndarray:
    """Zero-pad square images symmetrically to ``target`` x ``target``."""
    rows, cols = images.shape[-2:]
    if rows > target or cols > target:
        raise DatasetError(f"images {rows}x{cols} exceed target {target}")
    top, left = (target - rows) // 2, (target - cols) // 2
    pad = [(0, 0)] * (images.ndim - 2) + [(top, target - rows - top), (left, target - cols - left)]
    return np.pad(images, pad)
