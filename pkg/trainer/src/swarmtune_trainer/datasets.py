"""Local dataset loading for the trainer worker.

Datasets are read from ``$SWARMTUNE_DATA_DIR`` (default
``~/.cache/swarmtune/datasets``), one subdirectory per dataset:

* ``mnist/`` and ``fashion_mnist/``: the classic IDX files
  (``train-images-idx3-ubyte`` etc.), optionally gzipped, or a Keras-style
  ``mnist.npz`` with x_train/y_train/x_test/y_test arrays.
* ``cifar10/``: the python-pickle batches, either directly in the directory
  or under ``cifar-10-batches-py/``.

Images come back as float32 in [0, 1] with shape (N, H, W, C); labels as
int64.  Nothing is ever downloaded.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct
from pathlib import Path

import numpy as np

__all__ = ["DatasetMissing", "data_dir", "load_dataset"]

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

DATASET_SHAPES = {
    "mnist": (28, 28, 1),
    "fashion_mnist": (28, 28, 1),
    "cifar10": (32, 32, 3),
}


class DatasetMissing(FileNotFoundError):
    """The requested dataset is not present in the local data directory."""


def data_dir(override: str | os.PathLike | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get("SWARMTUNE_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "swarmtune" / "datasets"


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetMissing(f"missing {name}[.gz] under {directory}")


def read_idx(path: Path) -> np.ndarray:
    """Parse one IDX file (unsigned-byte payload, 1-D labels or 3-D images)."""
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">I", f.read(4))[0]
        ndim = magic & 0xFF
        if magic >> 8 != 0x08 or ndim not in (1, 3):
            raise ValueError(f"{path}: unsupported IDX magic {magic:#x}")
        dims = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {data.size}")
    return data.reshape(dims)


def _load_idx_pair(directory: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x_train = read_idx(_find(directory, IDX_FILES["train_images"]))
    y_train = read_idx(_find(directory, IDX_FILES["train_labels"]))
    x_test = read_idx(_find(directory, IDX_FILES["test_images"]))
    y_test = read_idx(_find(directory, IDX_FILES["test_labels"]))
    return x_train, y_train, x_test, y_test


def _load_npz(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["x_train"], z["y_train"], z["x_test"], z["y_test"]


def _load_cifar10(directory: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    batches_dir = directory / "cifar-10-batches-py"
    if not batches_dir.exists():
        batches_dir = directory

    def read_batch(name: str) -> tuple[np.ndarray, np.ndarray]:
        path = batches_dir / name
        if not path.exists():
            raise DatasetMissing(f"missing {name} under {batches_dir}")
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        data = batch[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return data, np.asarray(batch[b"labels"])

    xs, ys = zip(*(read_batch(f"data_batch_{i}") for i in range(1, 6)))
    x_test, y_test = read_batch("test_batch")
    return np.concatenate(xs), np.concatenate(ys), x_test, y_test


def load_dataset(
    name: str, directory: str | os.PathLike | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(x_train, y_train, x_test, y_test) with images scaled into [0, 1]."""
    if name not in DATASET_SHAPES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_SHAPES)}")
    root = data_dir(directory) / name
    if not root.exists():
        raise DatasetMissing(
            f"dataset directory {root} does not exist; "
            f"place the files there or set SWARMTUNE_DATA_DIR"
        )
    if name == "cifar10":
        x_train, y_train, x_test, y_test = _load_cifar10(root)
    else:
        npz = root / "mnist.npz"
        if npz.exists():
            x_train, y_train, x_test, y_test = _load_npz(npz)
        else:
            x_train, y_train, x_test, y_test = _load_idx_pair(root)

    h, w, c = DATASET_SHAPES[name]

    def to_images(arr: np.ndarray) -> np.ndarray:
        arr = arr.reshape(-1, h, w, c)
        return arr.astype(np.float32) / 255.0

    return (
        to_images(x_train),
        y_train.astype(np.int64),
        to_images(x_test),
        y_test.astype(np.int64),
    )
