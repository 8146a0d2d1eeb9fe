import numpy as np
import pytest

from taskrec.checkpoint import (CheckpointError, load_manifest, load_params,
                                save_manifest, save_params, load_tensor,
                                save_tensor, MAGIC)
from taskrec.tensor import ParamSet, Tensor


def random_params(seed=0):
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("conv.w", Tensor(rng.standard_normal((4, 2, 3, 3))
                            .astype(np.float32)))
    ps.add("conv.b", Tensor(rng.standard_normal(4).astype(np.float32)))
    ps.add("oracle", Tensor(rng.standard_normal((5, 5))))  # float64
    ps.add("scalarish", Tensor(np.array([rng.random()], np.float64)))
    return ps


def test_roundtrip_bit_exact(tmp_path):
    ps = random_params()
    path = tmp_path / "params.trkp"
    save_params(ps, path)
    back = load_params(path)
    assert back.names() == ps.names()
    for name, p in ps.items():
        q = back[name]
        assert q.dtype == p.dtype
        assert q.shape == p.shape
        assert np.array_equal(q.data, p.data)
    # second save of the loaded set is byte-identical
    path2 = tmp_path / "params2.trkp"
    save_params(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "p.trkp"
    save_params(random_params(), path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"TRKP"
    assert int.from_bytes(raw[4:6], "little") == 1  # version
    assert int.from_bytes(raw[6:10], "little") == 4  # tensor count


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.trkp"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_params(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "p.trkp"
    save_params(random_params(), path)
    raw = path.read_bytes()
    (tmp_path / "cut.trkp").write_bytes(raw[:len(raw) - 7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "cut.trkp")


def test_single_tensor_helpers(tmp_path):
    arr = np.random.default_rng(1).random((3, 4)).astype(np.float32)
    save_tensor(arr, "image", tmp_path / "img.trkp")
    assert np.array_equal(load_tensor(tmp_path / "img.trkp", "image"), arr)


def test_manifest_roundtrip(tmp_path):
    save_manifest(tmp_path / "m.json", num_iterations=10, init="fbp")
    m = load_manifest(tmp_path / "m.json")
    assert m == {"num_iterations": 10, "init": "fbp"}
