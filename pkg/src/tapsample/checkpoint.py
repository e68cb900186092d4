"""Binary checkpoint files holding named tensors.

Layout: magic line ``TAPSAMPLE-CKPT v1\\n``, then a little-endian uint32
tensor count, then per tensor: name length (uint32), name bytes (utf-8),
rank (uint32), each dimension (uint32), values as little-endian float32
in row-major order. Tensors are written in sorted-name order so the same
contents always produce the same bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC_PREFIX = b"TAPSAMPLE-CKPT "
MAGIC = b"TAPSAMPLE-CKPT v1\n"


class CheckpointFormatError(ValueError):
    """File is not a readable v1 checkpoint."""


def save_checkpoint(path, tensors):
    """Write a dict of name -> array-like. Values are stored as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes(order="C"))


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read a v1 checkpoint back into a dict of name -> float64 array.

    Rejects files with an unknown version line.
    """
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
        if head != MAGIC:
            if head.startswith(MAGIC_PREFIX):
                version = head[len(MAGIC_PREFIX):].split(b"\n")[0].decode("utf-8", "replace")
                raise CheckpointFormatError(f"unsupported checkpoint version {version!r}")
            raise CheckpointFormatError("not a TAPSAMPLE-CKPT file")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"dims of {name}"))[0]
                for _ in range(rank)
            )
            n_values = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 4 * n_values, f"values of {name}")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            tensors[name] = values.reshape(shape)
        extra = f.read(1)
        if extra:
            raise CheckpointFormatError("trailing bytes after last tensor")
    return tensors


def save_scalar(value):
    """Represent a python scalar as a rank-0 tensor."""
    return np.asarray(float(value))


def load_scalar(tensors, name):
    arr = tensors[name]
    if arr.shape != ():
        raise CheckpointFormatError(f"tensor {name!r} is not a scalar")
    return float(arr)
