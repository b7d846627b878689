import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from slmkit.checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from slmkit.errors import CheckpointVersionError, CorruptCheckpointError, ShapeMismatchError
from slmkit.numcore import Parameter

arrays = st.dictionaries(
    st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=6),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=64)),
    max_size=4)


def sample():
    return Checkpoint({"a.w": np.arange(6.0).reshape(2, 3), "b": np.array(1.5)}, stage="Stage2_Warmup", step=7,
                      rng_state={"state": 2**100}, config={"lr": 0.1}, meta={"vocab": ["x"]})


@settings(max_examples=50, deadline=None)
@given(arrs=arrays, step=st.integers(0, 2**40))
def test_round_trip_is_byte_idempotent(arrs, step):
    blob = Checkpoint(arrs, stage="s", step=step).to_bytes()
    back = Checkpoint.from_bytes(blob)
    assert back.to_bytes() == blob
    for k, v in arrs.items():
        np.testing.assert_array_equal(back.arrays[k], v)


def test_file_round_trip(tmp_path):
    save_checkpoint(sample(), tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert (back.stage, back.step, back.rng_state, back.config, back.meta) == (
        "Stage2_Warmup", 7, {"state": 2**100}, {"lr": 0.1}, {"vocab": ["x"]})
    save_checkpoint(back, tmp_path / "d")
    assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()


def test_bad_magic():
    with pytest.raises(CorruptCheckpointError):
        Checkpoint.from_bytes(b"NOPE" + sample().to_bytes()[4:])


def test_future_version():
    blob = sample().to_bytes()
    with pytest.raises(CheckpointVersionError):
        Checkpoint.from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncation(cut):
    with pytest.raises(CorruptCheckpointError):
        Checkpoint.from_bytes(sample().to_bytes()[:cut])


def test_trailing_bytes():
    with pytest.raises(CorruptCheckpointError):
        Checkpoint.from_bytes(sample().to_bytes() + b"\0")


def test_payload_length_must_match_shape():
    blob = bytearray(Checkpoint({"w": np.zeros(2)}).to_bytes())
    # the payload length field sits just before the 16 payload bytes
    struct.pack_into("<Q", blob, len(blob) - 16 - 8, 8)
    with pytest.raises(ShapeMismatchError):
        Checkpoint.from_bytes(bytes(blob))


def test_load_into_checks_names_and_shapes():
    params = {"w": Parameter(np.zeros((2, 2)))}
    with pytest.raises(ShapeMismatchError):
        load_into(params, {"w": np.zeros(3)})
    with pytest.raises(ShapeMismatchError):
        load_into(params, {})
    load_into(params, {"w": np.ones((2, 2))})
    np.testing.assert_array_equal(params["w"].data, 1)


def test_private_entries_are_not_parameters():
    ckpt = Checkpoint({"__opt_m__.w": np.zeros(1), "w": np.zeros(1)})
    assert list(ckpt.params()) == ["w"]
