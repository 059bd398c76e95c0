import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stalign.io import MAGIC, StsdError, read_stsd, write_stsd


def test_round_trip_with_meta(tmp_path):
    data = np.random.default_rng(0).random((3, 4, 6))
    meta = {"labels": [0, 1, 1], "grid": [2, 3], "note": "x"}
    write_stsd(tmp_path / "a.stsd", data, meta)
    st_ = read_stsd(tmp_path / "a.stsd")
    np.testing.assert_array_equal(st_.data, data)
    assert st_.meta == meta
    assert st_.grid == (2, 3)


def test_header_layout(tmp_path):
    write_stsd(tmp_path / "a.stsd", np.zeros((2, 5, 7)))
    raw = (tmp_path / "a.stsd").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<4I", raw, 4) == (1, 2, 5, 7)
    assert len(raw) == 20 + 2 * 5 * 7 * 8


def test_four_dimensional_input_records_grid(tmp_path):
    data = np.ones((1, 2, 3, 4))
    write_stsd(tmp_path / "a.stsd", data)
    st_ = read_stsd(tmp_path / "a.stsd")
    assert st_.data.shape == (1, 2, 12)
    assert st_.grid == (3, 4)


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:30], "truncated"),
    (lambda b: b[:10], "too short"),
    (lambda b: b + struct.pack("<I", 100) + b"{}", "trailer"),
    (lambda b: b + struct.pack("<I", 3) + b"{{{", "JSON"),
])
def test_malformed(tmp_path, mutate, msg):
    path = tmp_path / "a.stsd"
    write_stsd(path, np.zeros((1, 2, 3)))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(StsdError, match=msg):
        read_stsd(path)


def test_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        write_stsd(tmp_path / "a.stsd", np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "a.stsd"
    write_stsd(path, data)
    out = read_stsd(path).data
    assert out.tobytes() == np.ascontiguousarray(data, dtype="<f8").tobytes()
