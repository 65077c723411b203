"""L2LT binary tensor files.

Layout: magic ``b"L2LT"``, version u8 (1), rank u8, rank x u32 little-endian
dims, then the payload as little-endian f64 in row-major order.
"""

import struct

import numpy as np

from .errors import TensorFormatError

MAGIC = b"L2LT"
VERSION = 1


def encode(array):
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def decode(buf, source="<bytes>"):
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: bad magic bytes")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * count:
        raise TensorFormatError(f"{source}: payload size {len(buf) - off} does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(dims)


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), source=str(path))
