"""Dataset loading (MNIST IDX, CIFAR-10 binary), synthetic blobs, splits and batching."""

from __future__ import annotations

import gzip
import os
import queue
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

DATA_ENV = "STRUCTSPARSE_DATA"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic, expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX payload at byte offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def normalize(dataset: Dataset, mean: Sequence[float], std: Sequence[float]) -> Dataset:
    mean = np.asarray(mean, dtype=dataset.images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=dataset.images.dtype).reshape(1, -1, 1, 1)
    return replace(dataset, images=(dataset.images - mean) / std)


def load_mnist_idx(images_path, labels_path, normalize_pixels: bool = False, dtype=np.float64,
                   split: str = "") -> Dataset:
    """Parse big-endian IDX image/label files (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 image dims, got {images.ndim}")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    ds = Dataset((images.astype(dtype) / 255.0)[:, None], labels.astype(np.int64), "mnist", split)
    return normalize(ds, MNIST_MEAN, MNIST_STD) if normalize_pixels else ds


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 (N, H, W) images and (N,) labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_cifar10_binary(batch_paths: Sequence, normalize_pixels: bool = True, dtype=np.float64,
                        split: str = "") -> Dataset:
    """Parse CIFAR-10 binary batches: 1 label byte then 3072 bytes (R, G, B planes, row-major)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    ds = Dataset(np.concatenate(images).astype(dtype) / 255.0, np.concatenate(labels), "cifar10", split)
    return normalize(ds, CIFAR10_MEAN, CIFAR10_STD) if normalize_pixels else ds


def synthetic_blobs(n: int, classes: int, dim: int, seed=0, sigma: float = 0.5,
                    separation: float = 4.0, dtype=np.float64) -> Dataset:
    """Gaussian class blobs shaped (n, dim, 1, 1); centres are ``separation`` apart on average."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation / np.sqrt(2.0), size=(classes, dim))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centres[labels] + rng.normal(0.0, sigma, size=(n, dim))
    return Dataset(x.astype(dtype)[:, :, None, None], labels.astype(np.int64), "blobs", "", classes)


def split(dataset: Dataset, fractions: Sequence[float], seed=0) -> Tuple[Dataset, ...]:
    """Shuffle once and cut into consecutive pieces; rounding remainders go to the last piece."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ContractError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    sizes = [int(round(f * len(dataset))) for f in fractions[:-1]]
    sizes.append(len(dataset) - sum(sizes))
    out, start = [], 0
    for size in sizes:
        out.append(dataset.subset(perm[start:start + size]))
        start += size
    return tuple(out)


def batches(dataset: Dataset, batch_size: int, seed=None, shuffle: bool = True
            ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; the final short batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    order = np.random.default_rng(seed).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def prefetch(iterator: Iterator, depth: int = 2) -> Iterator:
    """Run ``iterator`` on a background thread, preserving order."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterator:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given and ${DATA_ENV} is unset")
    return Path(root)


def _find(root: Path, stem: str) -> Path:
    for sub in ("", "mnist", "MNIST/raw", "mnist/raw"):
        for suffix in ("", ".gz"):
            p = root / sub / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_mnist(root=None, dtype=np.float64) -> Tuple[Dataset, Dataset]:
    """Official MNIST train/test IDX files under the dataset root, normalized."""
    root = data_root(root)
    train = load_mnist_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"),
                           True, dtype, "train")
    test = load_mnist_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"),
                          True, dtype, "test")
    return train, test


def load_cifar10(root=None, dtype=np.float64) -> Tuple[Dataset, Dataset]:
    root = data_root(root)
    for sub in ("cifar-10-batches-bin", "cifar10", ""):
        base = root / sub
        if (base / "test_batch.bin").exists():
            train_files = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
            return (load_cifar10_binary(train_files, True, dtype, "train"),
                    load_cifar10_binary([base / "test_batch.bin"], True, dtype, "test"))
    raise FileNotFoundError(f"cifar-10-batches-bin not found under {root}")


def load_named(name: str, root=None, dtype=np.float64, n: Optional[int] = None, seed: int = 0
               ) -> Tuple[Dataset, Dataset]:
    """Resolve a dataset name used by configs: ``mnist``, ``cifar10`` or ``blobs``."""
    if name == "mnist":
        train, test = load_mnist(root, dtype)
    elif name == "cifar10":
        train, test = load_cifar10(root, dtype)
    elif name == "blobs":
        ds = synthetic_blobs(n or 1000, 10, 32, seed, dtype=dtype)
        train, test = split(ds, [0.8, 0.2], seed)
        return replace(train, split="train"), replace(test, split="test")
    else:
        raise ContractError(f"unknown dataset {name!r}")
    if n is not None:
        train = train.subset(slice(0, n))
    return train, test
