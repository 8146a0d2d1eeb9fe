"""Learned reconstruction operators mapping sinogram data to images.

Both operators unroll a fixed number of iterations around the ray
transform and its adjoint and learn the per-iteration update as a small
residual CNN.  Their final conv layers are zero-initialized, so an
untrained operator reproduces its initialization exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tomo
from .nn import apply_conv_stack, conv_stack
from .tensor import ParamSet, Tensor, add, concat, narrow, reshape

__all__ = ["UnrollConfig", "UnrollDivergence", "init_gradient_descent_params",
           "init_primal_dual_params", "learned_gradient_descent",
           "learned_primal_dual", "fbp_operator"]


@dataclass(frozen=True)
class UnrollConfig:
    """Architecture of an unrolled operator.

    ``channels_per_block`` are the hidden widths of each update CNN; with
    the default (32, 32) every update is a 3-layer 3x3 conv block.
    """

    num_iterations: int = 10
    channels_per_block: tuple[int, ...] = (32, 32)
    memory_channels: int = 5
    init: str = "zero"  # "zero" | "fbp"

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if not self.channels_per_block:
            raise ValueError("channels_per_block must be non-empty")
        if self.memory_channels < 1:
            raise ValueError("memory_channels must be >= 1")
        if self.init not in ("zero", "fbp"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def layers_per_block(self) -> int:
        return len(self.channels_per_block) + 1

    def manifest(self) -> dict:
        return {"num_iterations": self.num_iterations,
                "channels_per_block": list(self.channels_per_block),
                "memory_channels": self.memory_channels,
                "init": self.init}


class UnrollDivergence(FloatingPointError):
    """NaN detected inside an unrolled forward pass."""

    def __init__(self, scheme: str, iteration: int, block: str):
        self.scheme = scheme
        self.iteration = iteration
        self.block = block
        super().__init__(
            f"{scheme}: NaN at iteration {iteration} in {block} block")


def init_gradient_descent_params(cfg: UnrollConfig, seed: int,
                                 dtype=np.float32,
                                 zero_final: bool = True) -> ParamSet:
    """Per-iteration update CNNs on channels (current image, data gradient)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    channels = (2, *cfg.channels_per_block, 1)
    for k in range(cfg.num_iterations):
        conv_stack(params, rng, f"it{k}", channels, dtype=dtype,
                   zero_final=zero_final)
    return params


def init_primal_dual_params(cfg: UnrollConfig, seed: int, dtype=np.float32,
                            zero_final: bool = True) -> ParamSet:
    """Per-iteration dual and primal update CNNs with memory channels."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ParamSet()
    m = cfg.memory_channels
    dual_channels = (m + 2, *cfg.channels_per_block, m)
    primal_channels = (m + 1, *cfg.channels_per_block, m)
    for k in range(cfg.num_iterations):
        conv_stack(params, rng, f"it{k}.dual", dual_channels, dtype=dtype,
                   zero_final=zero_final)
        conv_stack(params, rng, f"it{k}.primal", primal_channels,
                   dtype=dtype, zero_final=zero_final)
    return params


def _as_batch(t: Tensor, trailing: tuple[int, int]) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return reshape(t, (1, 1) + trailing), False
    return reshape(t, (t.shape[0], 1) + trailing), True


def _check_nan(x: Tensor, scheme: str, iteration: int, block: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise UnrollDivergence(scheme, iteration, block)


def learned_gradient_descent(y: tomo.Sinogram, theta: ParamSet,
                             cfg: UnrollConfig) -> Tensor:
    """Unrolled gradient-descent reconstruction.

    Starting from the configured initialization, each iteration forms the
    data-fit gradient A*(A x - y) and applies a learned residual update to
    the pair (x, gradient).  Runs on the active tape end to end.  ``y`` is
    the linearized sinogram, (A, L) or batched (N, A, L).
    """
    geom = y.geometry
    h, w = geom.image_size
    ydata, batched = _as_batch(y.data, geom.sino_shape)
    n = ydata.shape[0]
    nl = cfg.layers_per_block

    if cfg.init == "fbp":
        x = Tensor(tomo.fbp(y).data.reshape(n, 1, h, w))
    else:
        x = Tensor(np.zeros((n, 1, h, w), ydata.dtype))

    yflat = reshape(ydata, (n,) + geom.sino_shape)
    for k in range(cfg.num_iterations):
        ax = tomo.ray_transform(reshape(x, (n, h, w)), geom).data
        resid = ax - yflat
        grad = tomo.adjoint(tomo.Sinogram(resid, geom))
        grad = reshape(grad, (n, 1, h, w))
        upd = apply_conv_stack(theta, f"it{k}", concat([x, grad], axis=1), nl)
        x = add(x, upd)
        _check_nan(x, "learned_gradient_descent", k, "update")
    out = reshape(x, (n, h, w))
    return out if batched else reshape(out, (h, w))


def learned_primal_dual(y: tomo.Sinogram, theta: ParamSet,
                        cfg: UnrollConfig) -> Tensor:
    """Unrolled primal-dual reconstruction.

    Keeps ``memory_channels`` primal images and dual sinograms; each
    iteration first updates the dual memory from (h, A x1, y), then the
    primal memory from (x, A* h1), both with learned residual CNNs.
    Returns the first primal channel.
    """
    geom = y.geometry
    h, w = geom.image_size
    a, l = geom.sino_shape
    m = cfg.memory_channels
    nl = cfg.layers_per_block
    ydata, batched = _as_batch(y.data, geom.sino_shape)
    n = ydata.shape[0]

    if cfg.init == "fbp":
        x0 = tomo.fbp(y).data.reshape(n, 1, h, w)
        finit = np.zeros((n, m, h, w), ydata.dtype)
        finit[:, :1] = x0
        f = Tensor(finit)
    else:
        f = Tensor(np.zeros((n, m, h, w), ydata.dtype))
    hmem = Tensor(np.zeros((n, m, a, l), ydata.dtype))

    for k in range(cfg.num_iterations):
        f1 = narrow(f, 1, 0, 1)
        af1 = tomo.ray_transform(reshape(f1, (n, h, w)), geom).data
        af1 = reshape(af1, (n, 1, a, l))
        dual_in = concat([hmem, af1, ydata], axis=1)
        hmem = add(hmem, apply_conv_stack(theta, f"it{k}.dual", dual_in, nl))
        _check_nan(hmem, "learned_primal_dual", k, "dual")

        h1 = narrow(hmem, 1, 0, 1)
        ath1 = tomo.adjoint(tomo.Sinogram(reshape(h1, (n, a, l)), geom))
        ath1 = reshape(ath1, (n, 1, h, w))
        primal_in = concat([f, ath1], axis=1)
        f = add(f, apply_conv_stack(theta, f"it{k}.primal", primal_in, nl))
        _check_nan(f, "learned_primal_dual", k, "primal")

    out = reshape(narrow(f, 1, 0, 1), (n, h, w))
    return out if batched else reshape(out, (h, w))


def fbp_operator(y: tomo.Sinogram, photons_per_line: float | None = None,
                 filter: str = "hann") -> Tensor:
    """Parameter-free baseline: optional count linearization, then FBP.

    Pass ``photons_per_line`` for photon-count data; leave it ``None`` when
    the sinogram already holds line integrals.
    """
    if photons_per_line is not None:
        y = tomo.log_transform(y, photons_per_line)
    return tomo.fbp(y, filter=filter)
