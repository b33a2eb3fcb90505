"""MNIST (IDX) and CIFAR-10 (binary batch) loaders plus batch iteration."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DTYPE
from .exceptions import DatasetFormatError, ValidationError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
# standard published per-channel statistics of the CIFAR-10 training set
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=DTYPE)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=DTYPE)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class DatasetHandle:
    images: np.ndarray
    labels: np.ndarray
    split: str
    classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be NCHW, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValidationError(
                f"{len(self.images)} images but {len(self.labels)} labels in split {self.split!r}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValidationError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, count):
        return DatasetHandle(self.images[:count], self.labels[:count], self.split, self.classes)


def _read_bytes(path):
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError("file not found", path=path) from None
    except OSError as exc:
        raise DatasetFormatError(str(exc), path=path) from None


def _find(directory, name):
    """``name`` or ``name.gz`` inside ``directory``."""
    for candidate in (name, name + ".gz"):
        p = Path(directory) / candidate
        if p.exists():
            return p
    raise DatasetFormatError("file not found", path=Path(directory) / name)


def read_idx(path, expected_magic):
    """Parse an IDX file into a uint8 array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DatasetFormatError("truncated header", path=path, offset=len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DatasetFormatError(f"bad magic {magic}, expected {expected_magic}", path=path, offset=0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError("truncated header", path=path, offset=len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DatasetFormatError(
            f"truncated payload: need {size} bytes, have {len(raw) - header}",
            path=path, offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(directory):
    """Returns ``(train, test)`` with 1x28x28 images scaled to [0, 1]."""
    out = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        images = read_idx(_find(directory, img_name), IDX_IMAGES_MAGIC)
        labels = read_idx(_find(directory, lbl_name), IDX_LABELS_MAGIC)
        x = (images.astype(DTYPE) / DTYPE(255))[:, None]
        out.append(DatasetHandle(x, labels.astype(np.int64), split))
    return tuple(out)


def read_cifar_batch(path):
    """Parse one binary batch into ``(uint8 images N x 3 x 32 x 32, labels)``."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DatasetFormatError(
            f"truncated record {whole} ({len(raw) - whole * CIFAR_RECORD} of {CIFAR_RECORD} bytes)",
            path=path, offset=whole * CIFAR_RECORD,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"label {labels[bad[0]]} out of range", path=path,
                                 offset=int(bad[0]) * CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize_cifar(images_u8):
    x = images_u8.astype(DTYPE) / DTYPE(255)
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(directory):
    """Returns ``(train, test)`` normalized with the fixed per-channel mean/std."""
    parts = [read_cifar_batch(_find(directory, name)) for name in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_batch(_find(directory, CIFAR_TEST_FILE))
    return (
        DatasetHandle(normalize_cifar(train_x), train_y, "train"),
        DatasetHandle(normalize_cifar(test_x), test_y, "test"),
    )


def load_dataset(name, directory):
    loaders = {"mnist": load_mnist, "cifar10": load_cifar10}
    if name not in loaders:
        raise ValidationError(f"unknown dataset {name!r}; choose from {sorted(loaders)}")
    return loaders[name](directory)


def resolve_data_dir(data_dir):
    """Explicit directory, else ``$GSAN_DATA_DIR``."""
    if data_dir:
        return Path(data_dir)
    env = os.environ.get("GSAN_DATA_DIR")
    if env:
        return Path(env)
    raise ValidationError("no dataset directory: pass --data-dir or set GSAN_DATA_DIR")


def random_crop_flip(images, rng, pad=4):
    """Random ``pad``-pixel crop and horizontal flip, one draw per image."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate_batches(dataset, batch_size, rng=None, augment=None):
    """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if augment is not None:
            x = augment(x, rng)
        yield x, dataset.labels[idx]
