import json
import struct

import numpy as np
import pytest

from pitreid import checkpoint


def test_round_trip(tmp_path, rng):
    tensors = [("param/a", rng.normal(size=(3, 4))), ("buffer/b", np.arange(5.0)), ("optim/s", np.float64(2.5))]
    checkpoint.save(tmp_path / "c", {"lr": 0.01}, tensors, epoch=7, extra={"k": [1, 2]})
    header, loaded = checkpoint.load(tmp_path / "c")
    assert header["epoch"] == 7 and header["config"] == {"lr": 0.01} and header["extra"] == {"k": [1, 2]}
    assert list(loaded) == ["param/a", "buffer/b", "optim/s"]
    for name, arr in tensors:
        assert np.array_equal(loaded[name], arr) and loaded[name].shape == np.shape(arr)


def test_layout(tmp_path):
    checkpoint.save(tmp_path / "c", {}, [("x", np.array([1.0, -2.0]))])
    blob = (tmp_path / "c").read_bytes()
    assert blob[:8] == b"PITCKPT\n"
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    assert version == 1
    header = json.loads(blob[20:20 + hlen])
    assert header["tensors"] == [{"name": "x", "offset": 0, "shape": [2]}]
    assert blob[20 + hlen:] == np.array([1.0, -2.0], dtype="<f8").tobytes()


def test_identical_inputs_identical_bytes(tmp_path, rng):
    t = [("a", rng.normal(size=(2, 2)))]
    checkpoint.save(tmp_path / "1", {"b": 1, "a": 2}, t)
    checkpoint.save(tmp_path / "2", {"a": 2, "b": 1}, t)
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(checkpoint.CheckpointError, match="not a pitreid"):
        checkpoint.load(tmp_path / "x")
    (tmp_path / "y").write_bytes(b"PITCKPT\n" + struct.pack("<IQ", 9, 2) + b"{}")
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load(tmp_path / "y")
