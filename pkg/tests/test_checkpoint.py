"""Checkpoint container round-trip and failure-mode checks."""
import struct

import numpy as np
import pytest

from skelflow.checkpoint import CheckpointError, FORMAT_VERSION, load_arrays, save_arrays


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "in.W": rng.standard_normal((7, 3)),
        "scalar": np.array(3.141592653589793),
        "norm.mean": rng.standard_normal(11) * 1e-300,  # subnormal-adjacent values
        "empty_dim": np.zeros((0, 4)),
    }
    path = tmp_path / "ckpt.bin"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded.keys()) == list(arrays.keys())
    for name, arr in arrays.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(
            loaded[name].view(np.uint64), np.asarray(arr, dtype=np.float64).view(np.uint64)
        ), name


def test_save_is_deterministic(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_arrays(p1, arrays)
    save_arrays(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(path)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "future.bin"
    save_arrays(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_arrays(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.bin"
    save_arrays(path, {"x": np.arange(16.0)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(path)
