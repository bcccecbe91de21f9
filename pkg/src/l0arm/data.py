"""MNIST IDX loading, synthetic fixtures and deterministic batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int
    name: str = ""
    normalization: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if len(self.targets) == 0:
            raise ValueError("dataset is empty")
        if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return len(self.targets)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.targets[:n], self.n_classes, f"{self.name}[:{n}]", self.normalization)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.n_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, path, magic: int, ndim: int):
    if len(buf) < 4:
        raise IDXFormatError(f"{path}: truncated header at offset 0")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{found:08x} at offset 0 (expected 0x{magic:08x})")
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IDXFormatError(f"{path}: truncated header at offset {len(buf)} (need {need} bytes)")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims))
    if len(buf) - need < size:
        raise IDXFormatError(
            f"{path}: truncated data at offset {len(buf)}: header declares {size} bytes after offset {need}"
        )
    if len(buf) - need > size:
        raise IDXFormatError(f"{path}: {len(buf) - need - size} trailing bytes after offset {need + size}")
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=need, count=size)


def read_idx_images(path) -> np.ndarray:
    (n, rows, cols), data = _header(_read_bytes(path), path, IMAGES_MAGIC, 3)
    if (rows, cols) != (28, 28):
        raise IDXFormatError(f"{path}: images are {rows}x{cols}, expected 28x28 (dimension header at offset 8)")
    return data.reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    (n,), data = _header(_read_bytes(path), path, LABELS_MAGIC, 1)
    return data.astype(np.int64)


def load_mnist_idx(images_path, labels_path, name="mnist", normalize="standardize") -> Dataset:
    """Load an IDX image/label pair as (N, 1, 28, 28) float32, standardized.

    Pixels are scaled to [0, 1] and then standardized with the fixed MNIST
    constants (mean 0.1307, std 0.3081). Gzipped files are accepted.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IDXFormatError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    x = images.astype(np.float32) / 255.0
    if normalize == "standardize":
        x = (x - MNIST_MEAN) / MNIST_STD
        note = f"(x/255 - {MNIST_MEAN}) / {MNIST_STD}"
    elif normalize == "unit":
        note = "x/255"
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    return Dataset(x[:, None, :, :].astype(np.float32), labels, 10, name, note)


def find_idx_pair(directory, split: str):
    directory = Path(directory)
    names = MNIST_FILES[split]
    paths = []
    for base in names:
        for cand in (directory / base, directory / (base + ".gz")):
            if cand.exists():
                paths.append(cand)
                break
        else:
            raise FileNotFoundError(f"{directory}: no {base}[.gz]")
    return tuple(paths)


def load_mnist_dir(directory, split: str = "train", normalize="standardize") -> Dataset:
    images, labels = find_idx_pair(directory, split)
    return load_mnist_idx(images, labels, name=f"mnist-{split}", normalize=normalize)


def make_synthetic(
    name: str,
    n: int,
    seed: int = 0,
    noise: float | None = None,
    separation: float = 5.0,
    n_features: int = 2,
    n_classes: int = 2,
) -> Dataset:
    """Small deterministic fixtures.

    ``xor``: the four corners of the unit square with parity labels plus
    Gaussian jitter (default sigma 0.1). ``blobs``: two unit-variance Gaussian
    classes whose means are ``separation`` standard deviations apart.

    Features beyond the first two are uninformative N(0, 1) distractors.
    ``n_classes`` may exceed 2 to match a wider output layer; the extra
    classes simply never occur.
    """
    if n_features < 2:
        raise ValueError("n_features must be >= 2")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n < 4:
        raise ValueError("n must be at least 4")
    rng = stream(seed, "synthetic", name)
    if name == "xor":
        sigma = 0.1 if noise is None else noise
        corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        idx = np.arange(n) % 4
        x = corners[idx] + sigma * rng.standard_normal((n, 2))
        y = (corners[idx].sum(1) % 2).astype(np.int64)
        x = _pad(x, n_features, rng)
        return Dataset(x.astype(np.float32), y, n_classes, "xor", f"corners + N(0, {sigma}^2)")
    if name == "blobs":
        sigma = 1.0 if noise is None else noise
        y = np.arange(n) % 2
        direction = np.array([1.0, 1.0]) / np.sqrt(2.0)
        means = np.outer(np.where(y == 1, 0.5, -0.5) * separation * sigma, direction)
        x = _pad(means + sigma * rng.standard_normal((n, 2)), n_features, rng)
        return Dataset(x.astype(np.float32), y.astype(np.int64), n_classes, "blobs", f"N(+-{separation / 2}*sigma*d, sigma={sigma})")
    raise ValueError(f"unknown synthetic dataset {name!r}")


def _pad(x, n_features, rng):
    if n_features == x.shape[1]:
        return x
    return np.hstack([x, rng.standard_normal((len(x), n_features - x.shape[1]))])


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return stream(seed, "batches", epoch).permutation(n)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield (x, y) minibatches in an order keyed by (seed, epoch); the short tail batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(dataset.n, seed, epoch)
    for start in range(0, dataset.n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.targets[idx]
