"""Supervised data: MNIST ingestion, synthetic head phantoms, augmentation,
and triplet assembly.

Measurement data is always generated on the fly from the images (fresh
noise per epoch); every emitted triplet's sinogram can be regenerated
bitwise from (source seed, global sample index).
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tomo
from .tensor import Tensor

__all__ = [
    "Dataset", "PhantomSpec", "TripletBatch", "TripletSource",
    "load_mnist", "generate_phantom", "make_phantom_dataset", "augment",
    "make_triplets", "MnistFormatError",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# Number of trailing MNIST training images held out for validation.
VALIDATION_SIZE = 10_000


class MnistFormatError(IOError):
    """IDX file rejected: bad magic or truncation, with the byte offset."""


@dataclass
class Dataset:
    """Images in [0,1] with per-split index arrays.

    ``targets`` holds integer labels (classification) or one mask per image
    (segmentation).
    """

    images: np.ndarray
    targets: np.ndarray
    splits: dict[str, np.ndarray]

    def __post_init__(self):
        n = self.images.shape[0]
        if len(self.targets) != n:
            raise ValueError(
                f"{n} images but {len(self.targets)} targets")
        for name, idx in self.splits.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"split {name!r} has out-of-range indices")

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.images[idx], self.targets[idx]


# ---------------------------------------------------------------------------
# MNIST (IDX format)


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise MnistFormatError(f"{path}: truncated at byte {len(raw)}")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise MnistFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0, expected "
            f"0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MnistFormatError(f"{path}: truncated header at byte {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big")
            for i in range(ndim)]
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise MnistFormatError(
            f"{path}: expected {count} data bytes, file ends at byte "
            f"{len(raw)} (data starts at {header})")
    return np.frombuffer(raw, np.uint8, count, offset=header).reshape(dims)


def load_mnist(path, split_validation: bool = True) -> Dataset:
    """Load the four canonical IDX files from a directory.

    Images are scaled to [0, 1] float32 at 28x28 in file order; the last
    10,000 training images form the validation split.  Gzipped files are
    accepted transparently.
    """
    path = Path(path)

    def find(stem):
        for cand in (path / stem, path / (stem + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(
            f"missing MNIST file {stem}[.gz] under {path}")

    train_x = _read_idx(find(MNIST_FILES["train_images"]), IMAGES_MAGIC)
    train_y = _read_idx(find(MNIST_FILES["train_labels"]), LABELS_MAGIC)
    test_x = _read_idx(find(MNIST_FILES["test_images"]), IMAGES_MAGIC)
    test_y = _read_idx(find(MNIST_FILES["test_labels"]), LABELS_MAGIC)
    for name, (xs, ys) in {"train": (train_x, train_y),
                           "test": (test_x, test_y)}.items():
        if xs.shape[0] != ys.shape[0]:
            raise MnistFormatError(
                f"{name}: {xs.shape[0]} images vs {ys.shape[0]} labels")

    images = np.concatenate([train_x, test_x]).astype(np.float32) / 255.0
    targets = np.concatenate([train_y, test_y]).astype(np.int64)
    n_train = train_x.shape[0]
    # last 10k training images are the validation split; smaller (non-MNIST
    # sized) files fall back to a sixth of the training set
    n_val = min(VALIDATION_SIZE, n_train // 6) if split_validation else 0
    cut = n_train - n_val
    splits = {
        "train": np.arange(cut),
        "validation": np.arange(cut, n_train),
        "test": np.arange(n_train, n_train + test_x.shape[0]),
    }
    return Dataset(images, targets, splits)


# ---------------------------------------------------------------------------
# synthetic head phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Nested-ellipse head phantom with a designated low-contrast region.

    The image is a bright "skull" ring around a "white matter" interior;
    the "grey matter" region (the segmentation target) sits ``contrast``
    above the surrounding interior, which is the hard part of the task.
    """

    seed: int = 0
    size: int = 128
    num_texture_ellipses: int = 6
    skull_intensity: tuple[float, float] = (0.85, 1.0)
    white_intensity: tuple[float, float] = (0.35, 0.45)
    contrast: float = 0.06
    texture_amplitude: float = 0.02

    def __post_init__(self):
        if self.contrast <= 0:
            raise ValueError("grey-matter contrast must be positive")
        for lo, hi in (self.skull_intensity, self.white_intensity):
            if not (0 <= lo <= hi <= 1):
                raise ValueError("intensity ranges must be within [0, 1]")


def _ellipse_mask(size, cy, cx, ry, rx, angle):
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    y = ii - cy
    x = jj - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * x + sa * y) / rx
    v = (-sa * x + ca * y) / ry
    return u * u + v * v <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """(image, mask) pair; same spec (and seed) gives the identical pair."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.size
    c = (n - 1) / 2.0

    head_ry = n * rng.uniform(0.38, 0.44)
    head_rx = n * rng.uniform(0.32, 0.40)
    head_angle = rng.uniform(-0.3, 0.3)
    head = _ellipse_mask(n, c, c, head_ry, head_rx, head_angle)
    interior = _ellipse_mask(n, c, c, 0.90 * head_ry, 0.90 * head_rx,
                             head_angle)
    skull = head & ~interior

    img = np.zeros((n, n), np.float64)
    img[skull] = rng.uniform(*spec.skull_intensity)
    img[interior] = rng.uniform(*spec.white_intensity)

    # grey-matter target: one or two mid-size ellipses inside the interior
    grey = np.zeros((n, n), bool)
    for _ in range(int(rng.integers(1, 3))):
        gy = c + rng.uniform(-0.18, 0.18) * n
        gx = c + rng.uniform(-0.15, 0.15) * n
        gry = n * rng.uniform(0.08, 0.16)
        grx = n * rng.uniform(0.06, 0.14)
        cand = _ellipse_mask(n, gy, gx, gry, grx, rng.uniform(0, np.pi))
        grey |= cand & interior
    # guard ring around the target stays clean white matter so the contrast
    # is measurable against the adjacent tissue
    ring_zone = ndimage.binary_dilation(grey, iterations=4)

    placed = 0
    attempts = 0
    while placed < spec.num_texture_ellipses and attempts < 200:
        attempts += 1
        ty = c + rng.uniform(-0.28, 0.28) * n
        tx = c + rng.uniform(-0.25, 0.25) * n
        cand = _ellipse_mask(n, ty, tx, n * rng.uniform(0.03, 0.08),
                             n * rng.uniform(0.03, 0.08),
                             rng.uniform(0, np.pi))
        cand &= interior
        if not cand.any() or (cand & ring_zone).any():
            continue
        img[cand] += rng.uniform(-spec.texture_amplitude,
                                 spec.texture_amplitude)
        placed += 1

    img[grey] += spec.contrast
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32), grey.astype(np.float32)


def make_phantom_dataset(spec: PhantomSpec, num_train: int = 100,
                         num_val: int = 20, num_test: int = 20) -> Dataset:
    """Seeded family of phantoms with disjoint splits.

    Phantom i uses seed spec.seed + i; the first num_train are the training
    split, then validation, then test.
    """
    from dataclasses import replace
    num = num_train + num_val + num_test
    images = np.empty((num, spec.size, spec.size), np.float32)
    masks = np.empty((num, spec.size, spec.size), np.float32)
    for i in range(num):
        images[i], masks[i] = generate_phantom(replace(spec,
                                                       seed=spec.seed + i))
    splits = {"train": np.arange(num_train),
              "validation": np.arange(num_train, num_train + num_val),
              "test": np.arange(num_train + num_val, num)}
    return Dataset(images, masks, splits)


# ---------------------------------------------------------------------------
# augmentation


def apply_rigid(image: np.ndarray, mask: np.ndarray | None, dy: float,
                dx: float, angle: float) -> tuple[np.ndarray,
                                                  np.ndarray | None]:
    """Rotate by ``angle`` about the center, then translate by (dy, dx).

    Bilinear for the image (clamped back to [0, 1]), nearest neighbour for
    the mask so it stays binary.  The zero-magnitude transform is the
    identity.
    """
    if mask is not None and mask.shape != image.shape:
        raise ValueError(
            f"image {image.shape} and mask {mask.shape} shapes differ")
    c = (np.asarray(image.shape) - 1) / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    # affine_transform maps output_coord -> rot @ (out - c) + c - (dy, dx)
    offset = c - rot @ c - np.array([dy, dx])
    img_out = ndimage.affine_transform(
        np.asarray(image, np.float32), rot, offset=offset, order=1,
        mode="constant", cval=0.0)
    np.clip(img_out, 0.0, 1.0, out=img_out)
    mask_out = None
    if mask is not None:
        mask_out = ndimage.affine_transform(
            np.asarray(mask, np.float32), rot, offset=offset, order=0,
            mode="constant", cval=0.0)
    return img_out, mask_out


def augment(image: np.ndarray, mask: np.ndarray | None,
            seed: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Random rigid jitter: translation +-5 px per axis, rotation +-10 deg.

    The identical transform is applied to both arrays; see
    :func:`apply_rigid`.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dy, dx = rng.uniform(-5, 5, size=2)
    angle = rng.uniform(-np.radians(10), np.radians(10))
    return apply_rigid(image, mask, dy, dx, angle)


# ---------------------------------------------------------------------------
# triplet assembly


@dataclass
class TripletBatch:
    """One supervised batch: images, measured data, linearized data, targets.

    ``noise_seeds`` records the per-sample seeds so any y can be
    regenerated bitwise from (x, seed, index).
    """

    x: Tensor
    y: tomo.Sinogram
    y_lin: tomo.Sinogram
    z: np.ndarray
    indices: np.ndarray
    noise_seeds: np.ndarray


@dataclass
class TripletSource:
    """Streams (x, y, z) triplets from a dataset for one geometry and
    measurement model.

    Epoch order is shuffled by the stream seed; sample ``k`` of the stream
    (counting from 0 across epochs) always uses the noise seed derived from
    (seed, k), which makes every batch reproducible.
    """

    dataset: Dataset
    geometry: tomo.Geometry
    noise_model: tomo.NoiseModel
    seed: int = 0
    split: str = "train"
    augment_data: bool = False

    def __post_init__(self):
        images, _ = self.dataset.subset(self.split)
        if images.shape[1:] != tuple(self.geometry.image_size):
            raise ValueError(
                f"dataset images {images.shape[1:]} do not match geometry "
                f"image_size {self.geometry.image_size}")

    def _noise_seed(self, stream_seed: int, k: int) -> int:
        return int(np.random.SeedSequence([stream_seed, k])
                   .generate_state(1)[0])

    def _emit(self, images: np.ndarray, targets, indices, stream_seed: int,
              base_k: int) -> TripletBatch:
        n = images.shape[0]
        seeds = np.array([self._noise_seed(stream_seed, base_k + i)
                          for i in range(n)], np.int64)
        if self.augment_data:
            out_imgs = np.empty_like(images)
            seg = targets.ndim == images.ndim
            out_tgts = np.empty_like(targets) if seg else targets
            for i in range(n):
                m = targets[i] if seg else None
                img_a, m_a = augment(images[i], m, int(seeds[i]) ^ 0x5EED)
                out_imgs[i] = img_a
                if seg:
                    out_tgts[i] = m_a
            images, targets = out_imgs, out_tgts
        ys = []
        for i in range(n):
            ys.append(self.noise_model.sample(
                images[i], self.geometry, int(seeds[i])).data.data)
        y = tomo.Sinogram(Tensor(np.stack(ys)), self.geometry)
        y_lin = self.noise_model.linearize(y)
        return TripletBatch(Tensor(images), y, y_lin,
                            np.asarray(targets), np.asarray(indices), seeds)

    def batches(self, batch_size: int, seed: int):
        """Infinite stream of shuffled batches with fresh noise per epoch."""
        images, targets = self.dataset.subset(self.split)
        n = images.shape[0]
        if batch_size > n:
            raise ValueError(
                f"batch_size {batch_size} exceeds split size {n}")
        order_rng = np.random.Generator(np.random.PCG64(seed))
        k = 0
        while True:
            order = order_rng.permutation(n)
            for lo in range(0, n - batch_size + 1, batch_size):
                sel = order[lo:lo + batch_size]
                yield self._emit(images[sel], targets[sel], sel, seed, k)
                k += batch_size

    def arrays(self, split: str | None = None):
        """(images, targets) of a split, for evaluation."""
        return self.dataset.subset(split or self.split)

    def measure(self, images: np.ndarray, seed: int | None = None
                ) -> tomo.Sinogram:
        """Linearized measurements of given images with a fixed eval seed."""
        base = self.seed if seed is None else seed
        ys = []
        for i in range(images.shape[0]):
            s = int(np.random.SeedSequence([base, 0x0E7A1, i])
                    .generate_state(1)[0])
            ys.append(self.noise_model.sample(images[i], self.geometry,
                                              s).data.data)
        y = tomo.Sinogram(Tensor(np.stack(ys)), self.geometry)
        return self.noise_model.linearize(y)

    def regenerate(self, image: np.ndarray, stream_seed: int,
                   k: int) -> tomo.Sinogram:
        """Rebuild the measurement of stream sample ``k`` bit-exactly."""
        return self.noise_model.sample(image, self.geometry,
                                       self._noise_seed(stream_seed, k))


def make_triplets(dataset: Dataset, geometry: tomo.Geometry,
                  noise_model: tomo.NoiseModel, seed: int,
                  split: str = "train",
                  augment_data: bool = False) -> TripletSource:
    """Triplet source for (dataset, geometry, noise model); see
    :class:`TripletSource` for the streaming and reproducibility contract."""
    return TripletSource(dataset, geometry, noise_model, seed, split,
                         augment_data)
