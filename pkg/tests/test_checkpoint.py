import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fundus_vlm_cli.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    prune_checkpoints,
    save_checkpoint,
)
from fundus_vlm_cli.errors import CorruptionError, MigrationError
from fundus_vlm_cli.optim import OptimizerState, adamw_step


def _as_f32(array):
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def test_round_trip_preserves_parameters_state_and_meta(tmp_path, tiny_params):
    state = OptimizerState.zeros_like(tiny_params.tensors)
    grads = {name: np.full(t.shape, 0.01) for name, t in tiny_params.items()}
    adamw_step(tiny_params.tensors, grads, state, lr=1e-3)

    path = save_checkpoint(tmp_path / "ckpt" / "epoch-0001.vukp", tiny_params, state, {"epoch": 1, "mode": "finetune"})
    loaded = load_checkpoint(path)

    assert loaded.params.config == tiny_params.config
    assert list(loaded.params) == list(tiny_params)
    for name, tensor in tiny_params.items():
        assert_array_equal(loaded.params[name].data, _as_f32(tensor.data))
        assert_array_equal(loaded.state.m[name], _as_f32(state.m[name]))
    assert loaded.state.step == 1
    assert loaded.meta == {"epoch": 1, "mode": "finetune"}


def test_encoding_is_deterministic(tiny_params):
    assert encode_checkpoint(tiny_params, meta={"seed": 1}) == encode_checkpoint(tiny_params, meta={"seed": 1})


def test_without_state(tiny_params):
    assert decode_checkpoint(encode_checkpoint(tiny_params)).state is None


def test_flipped_byte_is_detected(tiny_params):
    data = bytearray(encode_checkpoint(tiny_params))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(data))


def test_truncation_is_detected(tiny_params):
    data = encode_checkpoint(tiny_params)
    with pytest.raises(CorruptionError):
        decode_checkpoint(data[:-100])


def test_bad_magic(tiny_params):
    data = encode_checkpoint(tiny_params)
    with pytest.raises(CorruptionError):
        decode_checkpoint(b"NOPE" + data[4:])


def test_unknown_version_needs_migration(tiny_params):
    data = encode_checkpoint(tiny_params)
    with pytest.raises(MigrationError):
        decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])


def test_prune_keeps_most_recent(tmp_path, tiny_params):
    for epoch in range(1, 5):
        save_checkpoint(tmp_path / f"epoch-{epoch:04d}.vukp", tiny_params)
    removed = prune_checkpoints(tmp_path, keep=2)
    assert [p.name for p in removed] == ["epoch-0001.vukp", "epoch-0002.vukp"]
    assert sorted(p.name for p in tmp_path.glob("*.vukp")) == ["epoch-0003.vukp", "epoch-0004.vukp"]
