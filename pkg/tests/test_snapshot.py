import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cptlab.core.snapshot import MAGIC, load_tensors, read_tensor, save_tensors, tensor_bytes, write_tensor


def test_header_layout():
    raw = tensor_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:4] == MAGIC
    itemsize, rank = struct.unpack("<BI", raw[4:9])
    assert (itemsize, rank) == (4, 2)
    assert struct.unpack("<2Q", raw[9:25]) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[25:], "<f4"), np.arange(6))


@settings(max_examples=60, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_roundtrip_is_bit_exact(a):
    buf = io.BytesIO()
    write_tensor(buf, a)
    buf.seek(0)
    b = read_tensor(buf)
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == np.ascontiguousarray(a).tobytes()


def test_container_of_several(tmp_path):
    arrays_in = [np.ones((2, 2), np.float32), np.arange(3, dtype=np.float64), np.zeros((0, 4), np.float32)]
    save_tensors(tmp_path / "x.bin", arrays_in)
    out = load_tensors(tmp_path / "x.bin")
    assert len(out) == 3
    for a, b in zip(arrays_in, out):
        np.testing.assert_array_equal(a, b)


def test_rejects_integers_and_bad_magic():
    with pytest.raises(TypeError):
        tensor_bytes(np.arange(3))
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(b"NOPE" + bytes(10)))


def test_truncated_payload():
    raw = tensor_bytes(np.ones(4, np.float32))
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(raw[:-2]))
