import struct
from pathlib import Path

import numpy as np
import pytest


def write_idx_images(path: Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", 0x00000803, *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", 0x00000801, arr.shape[0]))
        fh.write(arr.astype(np.uint8).tobytes())


def make_shape_images(rng, n, size=28):
    """Tiny synthetic 'digit-like' set: class = one of three stroke shapes.

    Good enough to drive classifier training loops in tests without MNIST.
    """
    images = np.zeros((n, size, size), np.float32)
    labels = rng.integers(0, 3, n)
    for i, lab in enumerate(labels):
        cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
        if lab == 0:  # vertical bar
            images[i, size // 4: 3 * size // 4, cx - 1:cx + 2] = 1.0
        elif lab == 1:  # horizontal bar
            images[i, cy - 1:cy + 2, size // 4: 3 * size // 4] = 1.0
        else:  # square ring
            images[i, cy - 5:cy + 5, cx - 5:cx + 5] = 1.0
            if cy - 3 < cy + 3 and cx - 3 < cx + 3:
                images[i, cy - 3:cy + 3, cx - 3:cx + 3] = 0.0
    return images, labels.astype(np.int64)


@pytest.fixture
def fake_mnist_dir(tmp_path):
    rng = np.random.default_rng(7)
    train_x, train_y = make_shape_images(rng, 60)
    test_x, test_y = make_shape_images(rng, 24)
    d = tmp_path / "mnist"
    d.mkdir()
    write_idx_images(d / "train-images-idx3-ubyte",
                     (train_x * 255).astype(np.uint8))
    write_idx_labels(d / "train-labels-idx1-ubyte", train_y)
    write_idx_images(d / "t10k-images-idx3-ubyte",
                     (test_x * 255).astype(np.uint8))
    write_idx_labels(d / "t10k-labels-idx1-ubyte", test_y)
    return d


def disc_image(size: int, radius: float, value: float = 1.0) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size]
    u = jj - (size - 1) / 2.0
    v = ii - (size - 1) / 2.0
    return (value * ((u * u + v * v) <= radius * radius)).astype(np.float64)
