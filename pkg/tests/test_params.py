import struct

import numpy as np
import pytest

from scnet.params import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ParameterStore,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)


def make_store(rng):
    s = ParameterStore()
    s.add("z.weight", rng.normal(size=(3, 4)))
    s.add("a.alpha", np.array(0.5))
    s.add("m.vec", rng.normal(size=7) * 1e-300)
    return s


def test_store_basics(rng):
    s = make_store(rng)
    assert s.names() == ["a.alpha", "m.vec", "z.weight"]
    assert all(p.requires_grad for _, p in s.items())
    with pytest.raises(KeyError, match="duplicate"):
        s.add("a.alpha", np.zeros(()))
    with pytest.raises(KeyError, match="unknown parameter"):
        s["nope"]


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    s = make_store(rng)
    s["z.weight"].data[0, 0] = -0.0
    s["z.weight"].data[0, 1] = 5e-324
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, s)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    loaded = read_checkpoint(path)
    for k, v in s.state().items():
        assert loaded[k].tobytes() == v.tobytes()
    t = make_store(np.random.default_rng(99))
    load_checkpoint(path, t)
    for k in s.names():
        assert t[k].data.tobytes() == s[k].data.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", t)
    assert (tmp_path / "again.ckpt").read_bytes() == raw


def test_shape_mismatch_names_parameter(tmp_path, rng):
    s = make_store(rng)
    save_checkpoint(tmp_path / "c.ckpt", s)
    other = ParameterStore()
    other.add("z.weight", np.zeros((4, 3)))
    other.add("a.alpha", np.zeros(()))
    other.add("m.vec", np.zeros(7))
    with pytest.raises(CheckpointError, match="z.weight"):
        load_checkpoint(tmp_path / "c.ckpt", other)
    missing = ParameterStore()
    missing.add("a.alpha", np.zeros(()))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt", missing)


def test_corrupt_files(tmp_path, rng):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    s = make_store(rng)
    save_checkpoint(tmp_path / "c.ckpt", s)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v.ckpt")
