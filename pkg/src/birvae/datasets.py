"""IDX (MNIST) loading and writing, the reduced-prefix protocol, and synthetic data."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    items: np.ndarray  # N x n, values in [0, 1]
    labels: np.ndarray | None = None
    name: str = ""
    image_shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.float64)
        if items.ndim != 2:
            raise DomainError(f"dataset items must be a matrix, got shape {items.shape}")
        if items.size and (items.min() < 0.0 or items.max() > 1.0):
            raise DomainError("dataset values must lie in [0, 1]")
        items = items.view()
        items.flags.writeable = False
        object.__setattr__(self, "items", items)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (items.shape[0],):
                raise DomainError(f"{labels.shape[0]} labels for {items.shape[0]} items")
            labels = labels.view()
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.items.shape[0]

    @property
    def width(self) -> int:
        return self.items.shape[1]

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.items, labels, self.name, self.image_shape)


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _header(blob: bytes, expected_magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(blob) < need:
        raise FormatError(f"{path}: {len(blob)} bytes is too short for an IDX header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: found IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    payload = int(np.prod(dims, dtype=np.int64))
    if len(blob) - need != payload:
        raise FormatError(f"{path}: header declares {payload} payload bytes, file holds {len(blob) - need}")
    return dims


def load_idx_labels(path) -> np.ndarray:
    blob = _read(path)
    (count,) = _header(blob, LABEL_MAGIC, 1, path)
    return np.frombuffer(blob, dtype=np.uint8, offset=8, count=count).astype(np.int64)


def load_idx_raw(path) -> np.ndarray:
    """Image file as an ``N x rows x cols`` uint8 array."""
    blob = _read(path)
    count, rows, cols = _header(blob, IMAGE_MAGIC, 3, path)
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def load_idx_images(path, labels_path=None) -> Dataset:
    raw = load_idx_raw(path)
    count, rows, cols = raw.shape
    labels = load_idx_labels(labels_path) if labels_path is not None else None
    items = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(items, labels, Path(path).name, (rows, cols))


def write_idx_images(path, pixels: np.ndarray) -> None:
    """Write an ``N x rows x cols`` uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.dtype != np.uint8:
        raise DomainError(f"expected an N x rows x cols uint8 array, got {pixels.dtype} {pixels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *pixels.shape))
        f.write(pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DomainError("labels must be a vector of values in [0, 255]")
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def to_uint8(ds: Dataset) -> np.ndarray:
    """Inverse of the /255 scaling, shaped for :func:`write_idx_images`."""
    rows, cols = ds.image_shape or (1, ds.width)
    return np.rint(ds.items * 255.0).astype(np.uint8).reshape(len(ds), rows, cols)


def take_prefix(ds: Dataset, n: int) -> Dataset:
    if n < 0 or n > len(ds):
        raise IndexError(f"cannot take {n} items from a dataset of {len(ds)}")
    labels = ds.labels[:n] if ds.labels is not None else None
    return Dataset(ds.items[:n], labels, f"{ds.name}[:{n}]", ds.image_shape)


def synthetic_gmm(n_dims: int, k_components: int, n_samples: int, seed: int,
                  sigma: float = 0.05) -> Dataset:
    """Equal-weight Gaussian mixture with means drawn in ``[0.2, 0.8]^n``, clipped to ``[0, 1]``.

    The component index is stored as the label; the generating means are
    reproducible from the seed via :func:`synthetic_gmm_means`.
    """
    if min(n_dims, k_components, n_samples) <= 0:
        raise DomainError("synthetic_gmm sizes must be positive")
    gen = np.random.Generator(np.random.PCG64(seed))
    means = gen.uniform(0.2, 0.8, (k_components, n_dims))
    labels = gen.integers(0, k_components, n_samples)
    items = means[labels] + sigma * gen.standard_normal((n_samples, n_dims))
    return Dataset(np.clip(items, 0.0, 1.0), labels, f"gmm{k_components}x{n_dims}")


def synthetic_gmm_means(n_dims: int, k_components: int, seed: int) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(seed))
    return gen.uniform(0.2, 0.8, (k_components, n_dims))
