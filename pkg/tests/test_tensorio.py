import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from anchordepth.errors import FormatError
from anchordepth.tensorio import (
    decode_tensor, encode_tensor, read_anchor_csv, read_tensor, write_anchor_csv, write_tensor,
)


def _layout_oracle(buf):
    # independent reading of the byte layout, field by field
    assert buf[:4] == b"ANCH"
    version = int.from_bytes(buf[4:8], "little")
    dtype, rank = buf[8], buf[9]
    reserved = int.from_bytes(buf[10:12], "little")
    dims = [int.from_bytes(buf[12 + 4 * i:16 + 4 * i], "little") for i in range(rank)]
    start = 12 + 4 * rank
    size = {1: 8, 2: 4, 3: 1}[dtype]
    fmt = {1: "d", 2: "f", 3: "B"}[dtype]
    n = int(np.prod(dims))
    vals = struct.unpack("<" + fmt * n, buf[start:start + size * n])
    return version, dtype, rank, reserved, dims, vals


def test_rank3_channel_major_layout():
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) * 1.5
    version, dtype, rank, reserved, dims, vals = _layout_oracle(encode_tensor(a))
    assert (version, dtype, rank, reserved, dims) == (1, 1, 3, 0, [2, 3, 4])
    assert len(vals) == 24
    assert vals[1 * 12 + 2 * 4 + 3] == a[1, 2, 3]
    assert list(vals) == [float(v) for v in a.ravel()]


def test_roundtrip_file_identical_bytes(tmp_path):
    a = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    p = tmp_path / "t.anch"
    write_tensor(p, a)
    b = read_tensor(p)
    assert b.dtype == np.float64 and b.shape == (3, 4)
    assert b.tobytes() == a.tobytes()
    q = tmp_path / "u.anch"
    write_tensor(q, b)
    assert p.read_bytes() == q.read_bytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_float64_roundtrip_bit_exact(a):
    b = decode_tensor(encode_tensor(a))
    assert b.tobytes() == a.tobytes()


@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5))))
def test_uint8_roundtrip(a):
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == np.uint8 and np.array_equal(a, b)


def test_float32_widened_exactly():
    a = np.array([[0.1, 3.25]], dtype=np.float32)
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == np.float64
    np.testing.assert_array_equal(b, a.astype(np.float64))


GOOD = encode_tensor(np.ones((2, 3)))


@pytest.mark.parametrize("mutate, offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], 4),
    (lambda b: b[:8] + bytes([9]) + b[9:], 8),
    (lambda b: b[:9] + bytes([5]) + b[10:], 9),
    (lambda b: b[:10] + (1).to_bytes(2, "little") + b[12:], 10),
])
def test_malformed_headers_report_offset(mutate, offset):
    with pytest.raises(FormatError) as exc:
        decode_tensor(mutate(GOOD))
    assert exc.value.offset == offset


def test_truncated_and_trailing():
    with pytest.raises(FormatError) as exc:
        decode_tensor(GOOD[:-3])
    assert exc.value.offset == len(GOOD) - 3
    with pytest.raises(FormatError) as exc:
        decode_tensor(GOOD[:14])
    assert exc.value.offset == 14
    with pytest.raises(FormatError) as exc:
        decode_tensor(GOOD + b"\0")
    assert exc.value.offset == len(GOOD)


class _A:
    def __init__(self, r, c, d):
        self.row, self.col, self.depth_gt = r, c, d


def test_anchor_csv_roundtrip(tmp_path):
    p = tmp_path / "a.csv"
    write_anchor_csv(p, [_A(1, 2, 3.5), _A(0, 7, 0.1)])
    assert p.read_text().splitlines()[0] == "row,col,depth_m"
    assert read_anchor_csv(p) == [(1, 2, 3.5), (0, 7, 0.1)]


def test_anchor_csv_bad_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("row,col,depth_m\n1,2,3\n4,x,5\n")
    with pytest.raises(FormatError) as exc:
        read_anchor_csv(p)
    assert exc.value.offset == 3
