import struct

import numpy as np
import numpy.testing as npt
import pytest

from metadapt.checkpoint import MAGIC, load_arrays, save_arrays
from metadapt.errors import FormatError


def sample_payload():
    rng = np.random.default_rng(0)
    metadata = {"kind": "test", "epoch": 3, "nested": {"a": 1.5, "b": [1, 2]}}
    arrays = {
        "weights.w": rng.normal(size=(3, 4)),
        "weights.b": rng.normal(size=4).astype(np.float32),
        "counter": np.asarray(7, dtype=np.int64),
        "ints": np.arange(5, dtype=np.int64),
    }
    return metadata, arrays


def test_round_trip(tmp_path):
    metadata, arrays = sample_payload()
    path = str(tmp_path / "state.ckpt")
    save_arrays(path, metadata, arrays)
    meta2, arrays2 = load_arrays(path)
    assert meta2 == metadata
    assert set(arrays2) == set(arrays)
    for name, arr in arrays.items():
        assert arrays2[name].dtype == arr.dtype
        assert arrays2[name].shape == arr.shape
        npt.assert_array_equal(arrays2[name], arr)


def test_save_load_save_is_byte_identical(tmp_path):
    metadata, arrays = sample_payload()
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    save_arrays(p1, metadata, arrays)
    meta2, arrays2 = load_arrays(p1)
    save_arrays(p2, meta2, arrays2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_empty_arrays(tmp_path):
    path = str(tmp_path / "empty.ckpt")
    save_arrays(path, {"kind": "x"}, {})
    meta, arrays = load_arrays(path)
    assert meta == {"kind": "x"} and arrays == {}


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_arrays(str(path))


def test_bad_version(tmp_path):
    path = tmp_path / "ver.ckpt"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 2) + b"{}" + struct.pack("<I", 0))
    with pytest.raises(FormatError):
        load_arrays(str(path))


def test_truncated(tmp_path):
    metadata, arrays = sample_payload()
    path = str(tmp_path / "t.ckpt")
    save_arrays(path, metadata, arrays)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_arrays(path)


def test_trailing_garbage(tmp_path):
    metadata, arrays = sample_payload()
    path = str(tmp_path / "g.ckpt")
    save_arrays(path, metadata, arrays)
    with open(path, "ab") as fh:
        fh.write(b"xx")
    with pytest.raises(FormatError):
        load_arrays(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    metadata, arrays = sample_payload()
    save_arrays(str(tmp_path / "x.ckpt"), metadata, arrays)
    leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".ckpt-")]
    assert leftovers == []
