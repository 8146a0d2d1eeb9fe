"""Binary checkpoint format for parameter sets.

Layout (all integers little-endian):

    magic   4 bytes  b"TRKP"
    version u16      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, then name_len bytes of UTF-8
        dtype    u8   0 = float32, 1 = float64
        rank     u8
        extents  rank * u64
        values   raw little-endian floats, row-major

Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import ParamSet, Tensor

MAGIC = b"TRKP"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


def save_params(params: ParamSet, path) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data)
        code = _DTYPE_CODE[arr.dtype]
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                      .tobytes())
    path.write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    params = ParamSet()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dtype = _CODE_DTYPE[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(
                    f"{path}: truncated tensor {name!r} at byte {off}")
            arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                offset=off).reshape(shape)
            off += nbytes
        except struct.error as e:
            raise CheckpointError(f"{path}: truncated header at byte {off}: {e}")
        params.add(name, Tensor(arr.copy(), requires_grad=True))
    return params


def save_tensor(arr: np.ndarray, name: str, path) -> None:
    """Single-array convenience wrapper over the same format."""
    ps = ParamSet()
    ps.add(name, Tensor(np.asarray(arr)))
    save_params(ps, path)


def load_tensor(path, name: str) -> np.ndarray:
    return load_params(path)[name].data


def save_manifest(path, **fields) -> None:
    """Architecture/config echo stored next to a checkpoint."""
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
