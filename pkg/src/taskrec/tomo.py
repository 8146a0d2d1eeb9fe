"""2D parallel-beam tomography: ray transform, adjoint, FBP, noise models.

The ray transform is discretized Joseph-style: each ray is sampled at
equispaced points and the image is evaluated there by bilinear
interpolation.  The resulting linear map is materialized once per geometry
as a sparse matrix, so the adjoint is its exact transpose and the adjoint
identity <Ax, y> = <x, A*y> holds to rounding.

Conventions:

* pixel (i, j) of an (H, W) image sits at physical position
  u = (j - (W-1)/2) * pixel_spacing,  v = (i - (H-1)/2) * pixel_spacing
* a ray with angle phi and signed detector offset s runs along direction
  (cos phi, sin phi) through the point s * (-sin phi, cos phi)
* attenuation scaling for photon-count data uses ``MU`` (see below).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, apply_op

__all__ = [
    "Geometry", "Sinogram", "ray_transform", "adjoint", "fbp",
    "poisson_data", "gaussian_data", "log_transform", "NoiseModel",
    "MU", "COUNT_FLOOR",
]

# Attenuation scale converting image line integrals to optical depth.
# With MU = 0.16 a line integral of ~10 pixel units (a typical path through
# the strokes of a full-intensity handwritten digit) transmits
# exp(-0.16 * 10) ~ 20% of the incident photons.
MU = 0.16

# Count floor used when linearizing photon counts (in counts).
COUNT_FLOOR = 0.5


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition: uniform angles in [0, pi), centered detector."""

    num_angles: int
    num_lines: int
    image_size: tuple[int, int]
    pixel_spacing: float = 1.0
    detector_spacing: float | None = None
    ray_step: float = 0.5  # sample step along each ray, in pixel_spacing units
    angles: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_angles < 1 or self.num_lines < 1:
            raise ValueError("num_angles and num_lines must be >= 1")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError(f"bad image_size {self.image_size}")
        if self.detector_spacing is None:
            # Detector spans the image diagonal by default.
            diag = np.sqrt(2.0) * max(h, w) * self.pixel_spacing
            object.__setattr__(self, "detector_spacing", diag / self.num_lines)
        angles = np.arange(self.num_angles) * (np.pi / self.num_angles)
        object.__setattr__(self, "angles", angles)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.num_angles, self.num_lines)

    def offsets(self) -> np.ndarray:
        """Signed physical detector offsets of the line centers."""
        k = np.arange(self.num_lines, dtype=np.float64)
        return (k - (self.num_lines - 1) / 2.0) * self.detector_spacing

    def _key(self):
        return (self.num_angles, self.num_lines, self.image_size,
                self.pixel_spacing, self.detector_spacing, self.ray_step)


@dataclass
class Sinogram:
    """Line-integral (or photon-count) data tied to its geometry.

    ``data`` is (num_angles, num_lines), or (N, num_angles, num_lines) for
    a batch.
    """

    data: Tensor
    geometry: Geometry

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.shape[-2:] != self.geometry.sino_shape:
            raise ValueError(
                f"sinogram shape {tuple(self.data.shape)} does not match "
                f"geometry {self.geometry.sino_shape}")

    @property
    def batched(self) -> bool:
        return self.data.ndim == 3


# one system matrix per (geometry, dtype), built lazily
_MATRIX_CACHE: dict[tuple, tuple[sp.csr_matrix, sp.csr_matrix]] = {}


def _build_system_matrix(geom: Geometry) -> sp.csr_matrix:
    """Joseph-style discretization as a (rays x pixels) sparse matrix."""
    h, w = geom.image_size
    hp = geom.pixel_spacing
    step = geom.ray_step * hp
    diag = np.sqrt(h * h + w * w) * hp
    m = int(np.ceil(diag / step)) + 1
    t = (np.arange(m) - (m - 1) / 2.0) * step
    s = geom.offsets()

    rows, cols, vals = [], [], []
    n_lines = geom.num_lines
    for a, phi in enumerate(geom.angles):
        d = np.array([np.cos(phi), np.sin(phi)])
        n = np.array([-np.sin(phi), np.cos(phi)])
        # sample points for every (line, t): physical coordinates
        pu = s[:, None] * n[0] + t[None, :] * d[0]
        pv = s[:, None] * n[1] + t[None, :] * d[1]
        # fractional pixel indices
        fj = pu / hp + (w - 1) / 2.0
        fi = pv / hp + (h - 1) / 2.0
        j0 = np.floor(fj).astype(np.int64)
        i0 = np.floor(fi).astype(np.int64)
        aj = fj - j0
        ai = fi - i0
        ray_idx = a * n_lines + np.broadcast_to(
            np.arange(n_lines)[:, None], fi.shape)
        for di, dj, wgt in (
                (0, 0, (1 - ai) * (1 - aj)),
                (0, 1, (1 - ai) * aj),
                (1, 0, ai * (1 - aj)),
                (1, 1, ai * aj)):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w) & (wgt > 0)
            rows.append(ray_idx[ok])
            cols.append((ii * w + jj)[ok])
            vals.append(wgt[ok] * step)
    mat = sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.num_angles * n_lines, h * w), dtype=np.float64)
    return mat.tocsr()


def system_matrix(geom: Geometry, dtype=np.float64) -> sp.csr_matrix:
    """Cached forward matrix A for a geometry."""
    key = (geom._key(), np.dtype(dtype))
    hit = _MATRIX_CACHE.get(key)
    if hit is None:
        base_key = (geom._key(), np.dtype(np.float64))
        base = _MATRIX_CACHE.get(base_key)
        if base is None:
            a64 = _build_system_matrix(geom)
            base = (a64, a64.T.tocsr())
            _MATRIX_CACHE[base_key] = base
        if np.dtype(dtype) == np.float64:
            hit = base
        else:
            hit = (base[0].astype(dtype), base[1].astype(dtype))
        _MATRIX_CACHE[key] = hit
    return hit[0]


def _adjoint_matrix(geom: Geometry, dtype) -> sp.csr_matrix:
    system_matrix(geom, dtype)
    return _MATRIX_CACHE[(geom._key(), np.dtype(dtype))][1]


def _check_image(image: Tensor, geom: Geometry) -> None:
    if image.shape[-2:] != tuple(geom.image_size):
        raise ValueError(
            f"image shape {tuple(image.shape)} does not match geometry "
            f"image_size {geom.image_size}")
    if image.ndim not in (2, 3):
        raise ValueError(f"image must be (H,W) or (N,H,W), got {image.ndim}-d")


def _apply_sparse(mat: sp.csr_matrix, x: np.ndarray, out_shape) -> np.ndarray:
    """mat @ flattened-last-two-axes of x, reshaped to out_shape."""
    if x.ndim == 2:
        return (mat @ x.reshape(-1)).reshape(out_shape)
    flat = x.reshape(x.shape[0], -1)
    return (mat @ flat.T).T.reshape((x.shape[0],) + out_shape)


def ray_transform(image: Tensor | np.ndarray, geom: Geometry) -> Sinogram:
    """Line integrals of an image; linear, differentiable (tape-aware).

    Accepts (H, W) or a batch (N, H, W).
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    _check_image(image, geom)
    mat = system_matrix(geom, image.dtype)
    y = _apply_sparse(mat, image.data, geom.sino_shape)

    mat_t = _adjoint_matrix(geom, image.dtype)
    img_shape = tuple(geom.image_size)

    def bwd(g, acc):
        acc(image, _apply_sparse(mat_t, g, img_shape))
    out = apply_op(y, (image,), bwd)
    return Sinogram(out, geom)


def adjoint(sino: Sinogram) -> Tensor:
    """Exact discrete adjoint (transpose) of :func:`ray_transform`."""
    geom = sino.geometry
    data = sino.data
    mat_t = _adjoint_matrix(geom, data.dtype)
    x = _apply_sparse(mat_t, data.data, tuple(geom.image_size))

    mat = system_matrix(geom, data.dtype)

    def bwd(g, acc):
        acc(data, _apply_sparse(mat, g, geom.sino_shape))
    return apply_op(x, (data,), bwd)


def _ramp_filter(n_pad: int, spacing: float, window: str,
                 dtype=np.float64) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_pad, d=spacing)
    filt = np.abs(freqs)
    if window == "hann":
        # Hann window with cutoff at twice the Nyquist frequency: gain 1/2
        # at Nyquist, which damps noise amplification without the edge blur
        # of a window that reaches zero there.
        cutoff = 1.0 / spacing
        filt = filt * (0.5 * (1.0 + np.cos(np.pi * freqs / cutoff)))
    elif window != "ram-lak":
        raise ValueError(f"unknown FBP filter {window!r}")
    return filt.astype(dtype)


def fbp(sino: Sinogram, filter: str = "hann") -> Tensor:
    """Filtered back-projection: per-angle ramp filtering, then adjoint.

    ``filter`` is ``"hann"`` (windowed ramp, default) or ``"ram-lak"``.
    Linear and deterministic; not tape-aware (use the learned operators for
    differentiable reconstruction).
    """
    geom = sino.geometry
    y = sino.data.data
    n = geom.num_lines
    n_pad = 1 << int(np.ceil(np.log2(max(2 * n, 16))))
    filt = _ramp_filter(n_pad, geom.detector_spacing, filter, np.float64)
    spec = np.fft.rfft(y, n=n_pad, axis=-1) * filt
    q = np.fft.irfft(spec, n=n_pad, axis=-1)[..., :n]
    q = np.ascontiguousarray(q, dtype=np.float64)

    scale = (np.pi / geom.num_angles) * geom.detector_spacing \
        / geom.pixel_spacing ** 2
    mat_t = _adjoint_matrix(geom, np.float64)
    img = scale * _apply_sparse(mat_t, q, tuple(geom.image_size))
    return Tensor(img.astype(sino.data.dtype))


def poisson_data(image, geom: Geometry, photons_per_line: float,
                 seed: int) -> Sinogram:
    """Photon-count data: Poisson(photons_per_line * exp(-MU * Ax)).

    The image must be nonnegative.  Reproducible for a fixed seed.
    """
    if photons_per_line <= 0:
        raise ValueError(f"photons_per_line must be > 0, got {photons_per_line}")
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if np.any(image.data < 0):
        raise ValueError("poisson_data requires a nonnegative image")
    line_integrals = ray_transform(image.detach(), geom).data.data
    mean = photons_per_line * np.exp(-MU * np.asarray(line_integrals,
                                                      np.float64))
    rng = np.random.Generator(np.random.PCG64(seed))
    counts = rng.poisson(mean).astype(image.dtype)
    return Sinogram(Tensor(counts), geom)


def gaussian_data(image, geom: Geometry, noise_level: float,
                  seed: int) -> Sinogram:
    """A x plus i.i.d. Gaussian noise.

    The noise standard deviation is ``noise_level`` times the mean absolute
    value of A x over the sinogram (so 0.001 is 0.1% additive noise).
    """
    if noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {noise_level}")
    if not isinstance(image, Tensor):
        image = Tensor(image)
    clean = ray_transform(image.detach(), geom).data.data
    if noise_level == 0:
        return Sinogram(Tensor(clean.copy()), geom)
    sigma = noise_level * float(np.mean(np.abs(clean)))
    rng = np.random.Generator(np.random.PCG64(seed))
    noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
    return Sinogram(Tensor(noisy.astype(image.dtype)), geom)


def log_transform(counts: Sinogram, photons_per_line: float,
                  mu: float = MU, floor: float = COUNT_FLOOR) -> Sinogram:
    """Linearize Beer-Lambert counts into approximate line integrals.

    Returns -log(max(counts, floor) / photons_per_line) / mu; the floor
    (default 0.5 counts) keeps zero-count bins finite.
    """
    c = counts.data.data
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    lin = -np.log(np.maximum(c, floor) / photons_per_line) / mu
    return Sinogram(Tensor(lin.astype(counts.data.dtype)), counts.geometry)


@dataclass(frozen=True)
class NoiseModel:
    """Declarative measurement model so data can be regenerated per sample.

    kind "poisson": counts at ``photons_per_line``; the linearized view used
    by reconstruction applies :func:`log_transform`.
    kind "gaussian": additive noise at ``noise_level``; already linear.
    kind "none": exact line integrals.
    """

    kind: str = "none"
    photons_per_line: float = 60.0
    noise_level: float = 0.001

    def sample(self, image, geom: Geometry, seed: int) -> Sinogram:
        if self.kind == "poisson":
            return poisson_data(image, geom, self.photons_per_line, seed)
        if self.kind == "gaussian":
            return gaussian_data(image, geom, self.noise_level, seed)
        if self.kind == "none":
            if not isinstance(image, Tensor):
                image = Tensor(image)
            return Sinogram(ray_transform(image.detach(), geom).data, geom)
        raise ValueError(f"unknown noise model kind {self.kind!r}")

    def linearize(self, sino: Sinogram) -> Sinogram:
        if self.kind == "poisson":
            return log_transform(sino, self.photons_per_line)
        return sino
