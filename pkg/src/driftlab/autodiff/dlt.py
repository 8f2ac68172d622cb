"""DLT1 raw tensor container.

Layout: ``b"DLT1"``, u8 dtype code (0=f32, 1=f64), u8 ndim, ndim little-endian
u32 extents, then the row-major little-endian payload.
"""

import struct

import numpy as np

MAGIC = b"DLT1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; DLT1 stores f32 or f64")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BB", _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not a DLT1 tensor")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    offset = 6 + 4 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != count * dt.itemsize:
        raise FormatError(f"payload is {len(buf) - offset} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
