import numpy as np
import pytest

from aaformer.checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from aaformer.training import Trainer

from conftest import tiny_setup


def small_ck(rng):
    return Checkpoint(
        config={"model": {"embed_dim": 4}, "seed": 1},
        tensors={"b": rng.standard_normal((2, 3)), "a": np.array(1.5), "c": np.zeros((0, 4))},
        optimizer={"t": 3, "m": {"a": np.array(0.1)}, "v": {"a": np.array(0.2)}},
        rng_state=np.random.default_rng(0).bit_generator.state,
        step=5, epoch=1.25,
    )


def test_roundtrip_bit_identical(tmp_path, rng):
    ck = small_ck(rng)
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "x.aafk"))
    assert back.config == ck.config and back.step == 5 and back.epoch == 1.25
    for k, v in ck.tensors.items():
        assert back.tensors[k].shape == v.shape and back.tensors[k].tobytes() == v.tobytes()
    assert back.optimizer["t"] == 3
    assert back.optimizer["m"]["a"].tobytes() == ck.optimizer["m"]["a"].tobytes()
    assert back.rng_state == ck.rng_state


def test_layout_header(rng):
    data = encode(small_ck(rng))
    assert data[:4] == b"AAFK"
    assert int.from_bytes(data[4:8], "little") == 1


def test_every_corrupted_byte_is_caught(rng):
    data = encode(small_ck(rng))
    for pos in range(len(data)):
        bad = bytearray(data)
        bad[pos] ^= 0x5A
        with pytest.raises(CheckpointError):
            decode(bytes(bad))


def test_payload_corruption_is_integrity_error(rng):
    data = bytearray(encode(small_ck(rng)))
    data[-10] ^= 1
    with pytest.raises(CheckpointIntegrityError):
        decode(bytes(data))


def test_version_mismatch(rng):
    ck = small_ck(rng)
    ck.version = 2
    with pytest.raises(CheckpointVersionError, match="version 2"):
        decode(encode(ck))


@pytest.mark.parametrize("cut", [1, 7, 30, -1])
def test_truncated(rng, cut):
    data = encode(small_ck(rng))
    with pytest.raises(CheckpointIntegrityError):
        decode(data[:cut] if cut > 0 else data[:cut])


def test_trailing_bytes(rng):
    with pytest.raises(CheckpointIntegrityError):
        decode(encode(small_ck(rng)) + b"\0")


def test_resume_matches_uninterrupted(tmp_path):
    full = Trainer(*tiny_setup(), seed=2)
    ref = [r.row() for r in full.run(6)]

    first = Trainer(*tiny_setup(), seed=2)
    first.run(3)
    path = save_checkpoint(first.to_checkpoint(), tmp_path / "mid.aafk")
    resumed = Trainer.from_checkpoint(load_checkpoint(path))
    rest = [r.row() for r in resumed.run(6)]
    assert rest == ref[3:]
    for name, t in full.params.items():
        assert t.data.tobytes() == resumed.params[name].data.tobytes()
