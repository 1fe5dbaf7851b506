import gzip
import struct

import numpy as np
import pytest

from swarmtune_trainer.datasets import data_dir

MNIST_DIR = data_dir() / "mnist"

requires_mnist = pytest.mark.skipif(
    not MNIST_DIR.exists(),
    reason=f"MNIST files not found at {MNIST_DIR}; set SWARMTUNE_DATA_DIR (see README)",
)


def write_idx_images(path, images, compress=False):
    n, h, w = images.shape
    payload = struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes()
    opener = gzip.open if compress else open
    with opener(str(path) + (".gz" if compress else ""), "wb") as f:
        f.write(payload)


def write_idx_labels(path, labels, compress=False):
    payload = struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes()
    opener = gzip.open if compress else open
    with opener(str(path) + (".gz" if compress else ""), "wb") as f:
        f.write(payload)


def make_synthetic_mnist(root, n_train=12, n_test=5, compress=False):
    d = root / "mnist"
    d.mkdir(parents=True)
    rng = np.random.default_rng(0)
    write_idx_images(d / "train-images-idx3-ubyte", rng.integers(0, 256, (n_train, 28, 28), dtype=np.uint8), compress)
    write_idx_labels(d / "train-labels-idx1-ubyte", rng.integers(0, 10, n_train, dtype=np.uint8), compress)
    write_idx_images(d / "t10k-images-idx3-ubyte", rng.integers(0, 256, (n_test, 28, 28), dtype=np.uint8), compress)
    write_idx_labels(d / "t10k-labels-idx1-ubyte", rng.integers(0, 10, n_test, dtype=np.uint8), compress)
