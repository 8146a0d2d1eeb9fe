"""Dense tensors with a reverse-mode autodiff tape.

Design notes:

* Define-by-run: operations executed while a :class:`Tape` is active are
  recorded in execution order, which is automatically a topological order.
  Walking the records backwards once propagates adjoints to every input.
* Tensors are immutable after construction (parameter updates go through
  ``ParamSet.assign_``, which has a single writer by convention).
* Broadcasting is restricted to scalar-with-tensor.  Shape mismatches are
  rejected loudly; per-channel bias needs the explicit ``bias_add`` op.
* Convolution is cross-correlation (no kernel flip), zero padded.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "ParamSet", "ShapeError", "backward", "apply_op",
    "add", "sub", "mul", "neg", "matmul", "relu", "sigmoid", "conv2d",
    "max_pool2d", "softmax", "log", "exp", "clip_min", "tsum", "tmean",
    "reshape", "concat", "bias_add", "upsample2x", "narrow",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) do not fit an operation."""


class Tensor:
    """A dense n-d float array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar; scalars are lifted, anything else must match exactly.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


_ACTIVE_TAPE: "Tape | None" = None


def _needs(t, tape) -> bool:
    """True if gradients must flow into t for records made on ``tape``."""
    return isinstance(t, Tensor) and (t.requires_grad or t._tape is tape)


def _tracing(*tensors) -> bool:
    tape = _ACTIVE_TAPE
    return tape is not None and any(_needs(t, tape) for t in tensors)


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Entries are appended in forward execution order; every entry's inputs
    were created before it, so the reversed list is a valid backward order
    and each entry is visited exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, backward_fn) -> None:
        self._entries.append((out, backward_fn))
        out._tape = self

    def gradients(self, loss: Tensor, params: "ParamSet") -> dict:
        """Adjoints of a scalar ``loss`` w.r.t. every parameter.

        Parameters that did not contribute to ``loss`` get zero gradients.
        """
        if loss.shape != ():
            raise ShapeError(
                f"loss must be a scalar, got shape {tuple(loss.shape)}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, loss.dtype)}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        for out, backward_fn in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            backward_fn(g, accumulate)
        result = {}
        for name, p in params.items():
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            result[name] = Tensor(np.asarray(g, p.dtype))
        return result


def backward(loss: Tensor, params: "ParamSet") -> dict:
    """Gradient map of a scalar loss recorded on the tape that produced it."""
    if loss._tape is None:
        raise ValueError("loss was not produced on an active tape")
    return loss._tape.gradients(loss, params)


class ParamSet:
    """Named collection of trainable tensors (the single mutable store)."""

    def __init__(self, params: dict | None = None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name, t in params.items():
                self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def assign_(self, name: str, values: np.ndarray) -> None:
        """In-place update of a parameter's values (optimizer hook)."""
        p = self._params[name]
        if p.data.shape != values.shape:
            raise ShapeError(
                f"assign to {name!r}: shape {values.shape} != {p.data.shape}")
        p.data[...] = values

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self.items():
            out.add(name, Tensor(p.data.copy(), requires_grad=True))
        return out

    def merged(self, other: "ParamSet", prefix: str = "") -> "ParamSet":
        """New ParamSet referencing the same tensors of self and other."""
        out = ParamSet()
        for name, p in self.items():
            out._params[name] = p
        for name, p in other.items():
            out._params[prefix + name] = p
        return out


# ---------------------------------------------------------------------------
# op plumbing


def apply_op(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap raw output data as a Tensor, recording ``backward_fn`` if tracing.

    ``backward_fn(grad_out, accumulate)`` must call ``accumulate(inp, g)``
    for the inputs it propagates to.  Extension hook for ops defined outside
    this module (the ray transform and its adjoint).
    """
    out = Tensor(out_data)
    if _tracing(*inputs):
        _ACTIVE_TAPE._record(out, backward_fn)
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(
            f"{opname}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(
            f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ "
            "(only scalar-with-tensor broadcasting is supported)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Undo a scalar-with-tensor broadcast during backprop.
    if t.shape == () and np.ndim(g) != 0:
        return np.asarray(g.sum(), t.dtype)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            if _needs(a, tape):
                acc(a, _reduce_to(g, a))
            if _needs(b, tape):
                acc(b, _reduce_to(g, b))
        tape._record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            if _needs(a, tape):
                acc(a, _reduce_to(g, a))
            if _needs(b, tape):
                acc(b, _reduce_to(-g, b))
        tape._record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            if _needs(a, tape):
                acc(a, _reduce_to(g * b.data, a))
            if _needs(b, tape):
                acc(b, _reduce_to(g * a.data, b))
        tape._record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    if _tracing(a):
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, -g))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    if _tracing(a):
        mask = a.data > 0
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g * mask))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    out = Tensor(y)
    if _tracing(a):
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g * y * (1 - y)))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _tracing(a):
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g / a.data))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    if _tracing(a):
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g * y))
    return out


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    out = Tensor(np.maximum(a.data, a.dtype.type(floor)))
    if _tracing(a):
        mask = a.data > floor
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g * mask))
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis))
    if _tracing(a):
        shape = a.shape

        def bwd(g, acc):
            if axis is None:
                acc(a, np.broadcast_to(g, shape).astype(a.dtype, copy=False))
            else:
                acc(a, np.broadcast_to(np.expand_dims(g, axis), shape)
                    .astype(a.dtype, copy=False))
        _ACTIVE_TAPE._record(out, bwd)
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(np.mean(a.data, axis=axis))
    if _tracing(a):
        shape = a.shape

        def bwd(g, acc):
            gi = g / n
            if axis is None:
                acc(a, np.broadcast_to(gi, shape).astype(a.dtype, copy=False))
            else:
                acc(a, np.broadcast_to(np.expand_dims(gi, axis), shape)
                    .astype(a.dtype, copy=False))
        _ACTIVE_TAPE._record(out, bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _tracing(a):
        old = a.shape
        _ACTIVE_TAPE._record(out, lambda g, acc: acc(a, g.reshape(old)))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _tracing(*tensors):
        tape = _ACTIVE_TAPE
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g, acc):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if _needs(t, tape):
                    acc(t, piece)
        tape._record(out, bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    if _tracing(a):
        def bwd(g, acc):
            acc(a, (g - np.sum(g * y, axis=axis, keepdims=True)) * y)
        _ACTIVE_TAPE._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear-algebra and spatial primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise ShapeError(
            f"matmul: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            if _needs(a, tape):
                acc(a, g @ b.data.T)
            if _needs(b, tape):
                acc(b, a.data.T @ g)
        tape._record(out, bwd)
    return out


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: (N,K)+(K,) or (N,C,H,W)+(C,)."""
    if b.ndim != 1:
        raise ShapeError(f"bias must be 1-d, got shape {tuple(b.shape)}")
    if x.dtype != b.dtype:
        raise ShapeError(
            f"bias_add: dtype mismatch {x.dtype.name} vs {b.dtype.name}")
    if x.ndim == 2 and x.shape[1] == b.shape[0]:
        out = Tensor(x.data + b.data)
        axes = (0,)
    elif x.ndim == 4 and x.shape[1] == b.shape[0]:
        out = Tensor(x.data + b.data[:, None, None])
        axes = (0, 2, 3)
    else:
        raise ShapeError(
            f"bias_add: cannot add bias {tuple(b.shape)} to {tuple(x.shape)}")
    if _tracing(x, b):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            if _needs(x, tape):
                acc(x, g)
            if _needs(b, tape):
                acc(b, g.sum(axis=axes))
        tape._record(out, bwd)
    return out


# conv2d kernel backend: torch's CPU kernels when importable (markedly
# faster single-core than im2col+GEMM), otherwise a pure numpy path.
# Set TASKREC_NO_TORCH=1 to force the numpy path.
import os as _os

try:
    if _os.environ.get("TASKREC_NO_TORCH"):
        raise ImportError
    import torch as _torch
    _torch.set_num_threads(1)
except ImportError:
    _torch = None


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    # channel-major layout: contiguous block writes per kernel offset
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, ho, wo) -> np.ndarray:
    n, c = xp_shape[:2]
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n) + xp_shape[2:], dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    return dxp.transpose(1, 0, 2, 3)


def _conv_forward_np(xd, wd_, bd, padding, n, f, ho, wo):
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding)))
    else:
        xp = xd
    c, kh, kw = wd_.shape[1:]
    cols = _im2col(xp, kh, kw, ho, wo)
    out = (wd_.reshape(f, -1) @ cols).reshape(f, n, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bd is not None:
        out += bd[:, None, None]
    return out


def _conv_backward_np(g, xd, wd_, padding, need_x, need_w):
    n, f, ho, wo = g.shape
    c, kh, kw = wd_.shape[1:]
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding)))
    else:
        xp = xd
    gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
    dw = dx = None
    if need_w:
        # im2col recomputed here so forward does not keep columns alive
        dw = (gmat @ _im2col(xp, kh, kw, ho, wo).T).reshape(f, c, kh, kw)
    if need_x:
        dcols = wd_.reshape(f, -1).T @ gmat
        dxp = _col2im(dcols, xp.shape, kh, kw, ho, wo)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        dx = np.ascontiguousarray(dxp)
    return dx, dw


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation of (N,C,H,W) with kernels (F,C,kH,kW).

    Output spatial size is H + 2*padding - kH + 1 (stride 1 only).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {tuple(x.shape)} "
            f"and {tuple(w.shape)}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel expects {ck} "
            f"(input {tuple(x.shape)}, kernel {tuple(w.shape)})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    if x.dtype != w.dtype:
        raise ShapeError(
            f"conv2d: dtype mismatch {x.dtype.name} vs {w.dtype.name}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({f},)")
    ho = h + 2 * padding - kh + 1
    wo = wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}")

    if _torch is not None:
        bt = None if bias is None else _torch.from_numpy(bias.data)
        out_data = _torch.nn.functional.conv2d(
            _torch.from_numpy(x.data), _torch.from_numpy(w.data), bt,
            padding=padding).numpy()
    else:
        out_data = _conv_forward_np(
            x.data, w.data, None if bias is None else bias.data,
            padding, n, f, ho, wo)
    out = Tensor(out_data)

    inputs = (x, w) if bias is None else (x, w, bias)
    if _tracing(*inputs):
        tape = _ACTIVE_TAPE

        def bwd(g, acc):
            need_x = _needs(x, tape)
            need_w = _needs(w, tape)
            need_b = bias is not None and _needs(bias, tape)
            g = np.ascontiguousarray(g)
            if _torch is not None:
                mask = [need_x, need_w, need_b]
                if any(mask):
                    dx_t, dw_t, db_t = _torch.ops.aten.convolution_backward(
                        _torch.from_numpy(g), _torch.from_numpy(x.data),
                        _torch.from_numpy(w.data), [f], [1, 1],
                        [padding, padding], [1, 1], False, [0, 0], 1, mask)
                    if need_x:
                        acc(x, dx_t.numpy())
                    if need_w:
                        acc(w, dw_t.numpy())
                    if need_b:
                        acc(bias, db_t.numpy())
            else:
                dx, dw = _conv_backward_np(g, x.data, w.data, padding,
                                           need_x, need_w)
                if need_x:
                    acc(x, dx)
                if need_w:
                    acc(w, dw)
                if need_b:
                    acc(bias, g.sum(axis=(0, 2, 3)))
        tape._record(out, bwd)
    return out


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small")
    view = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    y = view.max(axis=(3, 5))
    out = Tensor(y)
    if _tracing(x):
        mask = view == y[:, :, :, None, :, None]

        def bwd(g, acc):
            dx = np.zeros_like(x.data)
            up = mask * g[:, :, :, None, :, None]
            dx[:, :, :2 * ho, :2 * wo] = up.reshape(n, c, 2 * ho, 2 * wo)
            acc(x, dx)
        _ACTIVE_TAPE._record(out, bwd)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (N,C,H,W)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor(y)
    if _tracing(x):
        def bwd(g, acc):
            acc(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
        _ACTIVE_TAPE._record(out, bwd)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for {x.ndim}-d")
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) outside extent "
            f"{x.shape[axis]} of axis {axis}")
    index = tuple([slice(None)] * axis + [slice(start, start + length)])
    out = Tensor(x.data[index])
    if _tracing(x):
        def bwd(g, acc):
            dx = np.zeros_like(x.data)
            dx[index] = g
            acc(x, dx)
        _ACTIVE_TAPE._record(out, bwd)
    return out
