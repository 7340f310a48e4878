"""Binary tensor checkpoint format round-trips and error handling."""

import numpy as np
import pytest

from padapt import checkpoint as ckpt


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "adapter.p2.w1": rng.normal(size=(4, 8)),
        "adapter.p2.b1": rng.normal(size=8),
        "lm.block0.attn.q_proj": rng.normal(size=(8, 8)),
        "scalar": np.array(3.25),
    }
    path = tmp_path / "model.ckpt"
    ckpt.save_tensors(path, tensors)
    loaded = ckpt.load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], arr)  # bitwise


def test_header_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    ckpt.save_tensors(path, {"x": np.zeros((2, 3))})
    blob = path.read_bytes()
    assert blob[:4] == b"PADT"
    assert int.from_bytes(blob[4:8], "little") == 1  # version
    assert int.from_bytes(blob[8:12], "little") == 1  # tensor count
    assert int.from_bytes(blob[12:16], "little") == 1  # name length
    assert blob[16:17] == b"x"


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_tensors(path)


def test_truncated(tmp_path):
    path = tmp_path / "model.ckpt"
    ckpt.save_tensors(path, {"x": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_tensors(path)


def test_missing_file(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_tensors(tmp_path / "absent.ckpt")


def test_identical_bytes_for_identical_content(tmp_path):
    arrs = {"a": np.linspace(0, 1, 7), "b": np.arange(4.0).reshape(2, 2)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    ckpt.save_tensors(p1, arrs)
    ckpt.save_tensors(p2, arrs)
    assert p1.read_bytes() == p2.read_bytes()
