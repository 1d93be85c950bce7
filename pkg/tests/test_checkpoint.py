import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from beat.checkpoint import MAGIC, Checkpoint, CheckpointError


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=True, allow_infinity=True)),
                       max_size=5))
def test_round_trip_bit_exact(arrays_):
    ck = Checkpoint(arrays_, {"epoch": 3, "history": [{"hr": 0.5}]})
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.meta == ck.meta and list(back.arrays) == list(arrays_)
    for k, v in arrays_.items():
        assert back.arrays[k].shape == v.shape and back.arrays[k].tobytes() == v.tobytes()


def test_header_layout_and_file_digest(tmp_path):
    ck = Checkpoint({"a": np.arange(3.0)}, {"k": 1})
    raw = ck.to_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<I", raw, 4)[0] == 1
    digest = ck.save(tmp_path / "c.ckpt")
    assert digest == ck.digest() and (tmp_path / "c.ckpt").read_bytes() == raw
    assert Checkpoint.load(tmp_path / "c.ckpt").arrays["a"].tolist() == [0.0, 1.0, 2.0]


def test_bad_magic_version_and_trailing():
    raw = Checkpoint({"a": np.ones(2)}, {}).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="version 9"):
        Checkpoint.from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")


def test_meta_is_key_order_independent():
    a = Checkpoint({"x": np.zeros(1)}, {"b": 1, "a": 2})
    b = Checkpoint({"x": np.zeros(1)}, {"a": 2, "b": 1})
    assert a.to_bytes() == b.to_bytes()
