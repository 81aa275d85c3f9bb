import struct

import numpy as np
import pytest

from malab.dit import DiTConfig, init_weights
from malab.workbench.checkpoint import (BadMagicError, CheckpointError,
                                        TruncatedCheckpointError,
                                        VersionMismatchError, load_checkpoint,
                                        save_checkpoint)


@pytest.fixture
def saved(tmp_path):
    config = DiTConfig(num_blocks=2, hidden_size=16, num_heads=2,
                       token_grid=(2, 2), num_classes=3, t_embed_dim=8)
    weights = init_weights(config, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(weights, path)
    return weights, path


def test_round_trip_bitwise_at_stored_precision(saved):
    weights, path = saved
    loaded = load_checkpoint(path)
    assert loaded.config == weights.config
    originals = dict(weights.named_tensors())
    for name, tensor in loaded.named_tensors():
        stored = originals[name].array.astype(np.float32).astype(np.float64)
        assert np.array_equal(tensor.array, stored), name
        assert tensor.array.dtype == np.float64


def test_round_trip_twice_is_identical(saved, tmp_path):
    _, path = saved
    again = tmp_path / "again.ckpt"
    save_checkpoint(load_checkpoint(path), again)
    assert path.read_bytes() == again.read_bytes()


def test_bad_magic(saved, tmp_path):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)


def test_version_mismatch(saved, tmp_path):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 9)
    bad = tmp_path / "vers.ckpt"
    bad.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(bad)


def test_truncated_payload_names_the_tensor(saved, tmp_path):
    _, path = saved
    data = path.read_bytes()
    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(data[:len(data) - 7])
    with pytest.raises(TruncatedCheckpointError) as err:
        load_checkpoint(bad)
    assert "block1" in str(err.value)


def test_distinct_error_classes(saved):
    assert issubclass(BadMagicError, CheckpointError)
    assert issubclass(VersionMismatchError, CheckpointError)
    assert issubclass(TruncatedCheckpointError, CheckpointError)
    assert BadMagicError is not VersionMismatchError


def test_forward_agrees_after_round_trip_of_rounded_weights(saved, tmp_path):
    # save/load/save/load: the second generation must be a fixed point
    _, path = saved
    first = load_checkpoint(path)
    path2 = tmp_path / "gen2.ckpt"
    save_checkpoint(first, path2)
    second = load_checkpoint(path2)
    for (_, a), (_, b) in zip(first.named_tensors(), second.named_tensors()):
        assert np.array_equal(a.array, b.array)
