from collections import OrderedDict

import pytest
import torch

from checkpoint import MAGIC, load_checkpoint, save_checkpoint
from exceptions import CheckpointError, FrozenParameterError
from integrity import FreezeGuard, sha256_hex, tensors_digest


def _arrays():
    return OrderedDict(
        [
            ("head/weight", torch.arange(6, dtype=torch.float32).reshape(2, 3)),
            ("head/steps", torch.tensor([3, 4], dtype=torch.long)),
            ("scene/token", torch.linspace(-1, 1, 5, dtype=torch.float64)),
        ]
    )


def test_roundtrip(tmp_path):
    path = tmp_path / "model.ckpt"
    digest = save_checkpoint(path, _arrays(), {"kind": "model", "seed": 2}, precision="float64")
    ckpt = load_checkpoint(path)
    assert ckpt.freeze_digest == digest
    assert ckpt.metadata == {"kind": "model", "seed": 2}
    assert ckpt.precision == "float64"
    assert list(ckpt.arrays) == list(_arrays())
    for name, tensor in _arrays().items():
        assert torch.equal(ckpt.arrays[name], tensor.to(ckpt.arrays[name].dtype))
    assert list(ckpt.namespace("head")) == ["weight", "steps"]
    assert "scene/token" in ckpt


def test_file_starts_with_the_magic_bytes(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _arrays())
    assert (tmp_path / "a.ckpt").read_bytes().startswith(MAGIC)


def test_digest_depends_on_the_values(tmp_path):
    arrays = _arrays()
    first = save_checkpoint(tmp_path / "a.ckpt", arrays)
    assert save_checkpoint(tmp_path / "b.ckpt", arrays) == first
    arrays["scene/token"] = arrays["scene/token"] + 1e-3
    assert save_checkpoint(tmp_path / "c.ckpt", arrays) != first


def test_corruption_is_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _arrays())
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_unreadable_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", _arrays(), precision="float16")


def test_sha256_known_value():
    assert sha256_hex(b"abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_freeze_guard():
    weight = torch.ones(3)
    guard = FreezeGuard()
    digest = guard.record("head", [("weight", weight)])
    assert digest == tensors_digest([("weight", torch.ones(3))])
    guard.verify("head", [("weight", weight)])
    weight[0] = 2.0
    with pytest.raises(FrozenParameterError, match="head"):
        guard.verify("head", [("weight", weight)])
    with pytest.raises(FrozenParameterError):
        guard.verify("backbone", [])
