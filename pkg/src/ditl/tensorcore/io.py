"""Binary tensor files.

Layout (all little-endian): 8 magic bytes ``DITLTNS1``, rank as int64, one int64
per extent, then the float64 payload in row-major order (last axis fastest).
"""
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"DITLTNS1"


class TensorFormatError(ValueError):
    pass


def to_bytes(array):
    a = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8")
    head = MAGIC + struct.pack("<q", a.ndim) + struct.pack(f"<{a.ndim}q", *a.shape)
    return head + a.tobytes(order="C")


def from_bytes(buf):
    if buf[:8] != MAGIC:
        raise TensorFormatError("bad magic bytes; not a tensor file")
    (rank,) = struct.unpack_from("<q", buf, 8)
    if rank < 0 or rank > 32:
        raise TensorFormatError(f"implausible rank {rank}")
    shape = struct.unpack_from(f"<{rank}q", buf, 16)
    start = 16 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - start != 8 * count:
        raise TensorFormatError(
            f"payload holds {(len(buf) - start) // 8} values, header promises {count}")
    return np.frombuffer(buf, dtype="<f8", offset=start, count=count).reshape(shape).astype(np.float64)


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(to_bytes(array))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
