"""ANCH binary tensor files and the anchor CSV format.

Layout (little-endian)::

    0   magic     4 bytes  b"ANCH"
    4   version   u32      1
    8   dtype     u8       1=float64, 2=float32, 3=uint8
    9   rank      u8       1, 2 or 3
    10  reserved  u16      0
    12  dims      rank x u32   (rank 3: channels, height, width)
    ..  payload   row-major, no padding
"""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ANCH"
VERSION = 1
HEADER = struct.Struct("<4sIBBH")

_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1")}
_NAMES = {"float64": 1, "float32": 2, "uint8": 3}


def _dtype_code(a: np.ndarray, dtype) -> int:
    if dtype is not None:
        try:
            return _NAMES[np.dtype(dtype).name]
        except KeyError:
            raise FormatError(f"unsupported dtype {dtype!r}") from None
    if a.dtype == np.bool_:
        return 3
    try:
        return _NAMES[a.dtype.name]
    except KeyError:
        raise FormatError(f"unsupported dtype {a.dtype}") from None


def encode_tensor(a, dtype=None) -> bytes:
    a = np.asarray(a)
    if a.ndim not in (1, 2, 3):
        raise FormatError(f"rank must be 1, 2 or 3, got {a.ndim}")
    code = _dtype_code(a, dtype)
    payload = np.ascontiguousarray(a, dtype=_CODES[code]).tobytes()
    head = HEADER.pack(MAGIC, VERSION, code, a.ndim, 0)
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    return head + dims + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse an ANCH byte string. float32 payloads are widened to float64."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", offset=0)
    if len(buf) < HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, code, rank, reserved = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _CODES:
        raise FormatError(f"unsupported dtype code {code}", offset=8)
    if rank not in (1, 2, 3):
        raise FormatError(f"unsupported rank {rank}", offset=9)
    if reserved != 0:
        raise FormatError(f"reserved field must be 0, got {reserved}", offset=10)
    start = HEADER.size + 4 * rank
    if len(buf) < start:
        raise FormatError("truncated dimensions", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, HEADER.size)
    dt = _CODES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    have = len(buf) - start
    if have < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {have}", offset=len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset=start + need)
    a = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=start).reshape(dims)
    if code == 1:
        return a.astype(np.float64)
    if code == 2:
        return a.astype(np.float64)
    return a.copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, a, dtype=None) -> None:
    atomic_write_bytes(path, encode_tensor(a, dtype))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_anchor_csv(path, anchors) -> None:
    """``anchors`` is an iterable of objects with ``row``, ``col`` and ``depth_gt``."""
    buf = io.StringIO()
    buf.write("row,col,depth_m\n")
    for a in anchors:
        buf.write(f"{int(a.row)},{int(a.col)},{float(a.depth_gt)!r}\n")
    atomic_write_bytes(path, buf.getvalue().encode())


def read_anchor_csv(path):
    """Return a list of ``(row, col, depth_m)`` tuples."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "depth_m"]:
            raise FormatError(f"unexpected anchor CSV header {header!r}", offset=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                row, col, depth = int(rec[0]), int(rec[1]), float(rec[2])
            except (ValueError, IndexError):
                raise FormatError(f"malformed anchor line {rec!r}", offset=lineno) from None
            out.append((row, col, depth))
    return out
