"""Small helpers for building and applying convolutional blocks."""

from __future__ import annotations

import numpy as np

from .tensor import ParamSet, Tensor, bias_add, conv2d, matmul, relu

__all__ = ["fanin_uniform", "add_conv", "add_dense", "conv_stack",
           "apply_conv", "apply_conv_stack", "apply_dense"]


def fanin_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Uniform init with limit sqrt(6 / fan_in); fan_in is all but axis 0."""
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def add_conv(params: ParamSet, rng, name: str, cin: int, cout: int,
             ksize: int = 3, dtype=np.float32, zero: bool = False) -> None:
    shape = (cout, cin, ksize, ksize)
    w = np.zeros(shape, dtype) if zero else fanin_uniform(rng, shape, dtype)
    params.add(f"{name}.w", Tensor(w))
    params.add(f"{name}.b", Tensor(np.zeros(cout, dtype)))


def add_dense(params: ParamSet, rng, name: str, nin: int, nout: int,
              dtype=np.float32, zero: bool = False) -> None:
    shape = (nin, nout)
    w = np.zeros(shape, dtype) if zero else \
        rng.uniform(-np.sqrt(6.0 / nin), np.sqrt(6.0 / nin),
                    size=shape).astype(dtype)
    params.add(f"{name}.w", Tensor(w))
    params.add(f"{name}.b", Tensor(np.zeros(nout, dtype)))


def conv_stack(params: ParamSet, rng, prefix: str, channels,
               dtype=np.float32, zero_final: bool = True) -> None:
    """Conv layers prefix.0 .. prefix.(L-1) following the channel list.

    ``channels`` is (cin, h1, ..., cout).  The final layer is
    zero-initialized by default so a fresh residual block is a no-op.
    """
    for i in range(len(channels) - 1):
        last = i == len(channels) - 2
        add_conv(params, rng, f"{prefix}.{i}", channels[i], channels[i + 1],
                 dtype=dtype, zero=zero_final and last)


def apply_conv(params: ParamSet, name: str, x: Tensor,
               padding: int = 1) -> Tensor:
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=padding)


def apply_conv_stack(params: ParamSet, prefix: str, x: Tensor,
                     num_layers: int) -> Tensor:
    """ReLU between layers, linear final layer; 3x3 kernels, padding 1."""
    for i in range(num_layers):
        x = apply_conv(params, f"{prefix}.{i}", x)
        if i < num_layers - 1:
            x = relu(x)
    return x


def apply_dense(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return bias_add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
