"""Binary parameter checkpoints.

Layout: the ASCII header line ``TDCKPT1\n`` followed by one record per
parameter: uint32 name length, utf-8 name, uint32 rank, uint32 extents,
then the values as little-endian float32 in row-major order.  Records are
written in sorted name order so files are byte-stable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TDCKPT1\n"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict):
    """Write a name -> ndarray mapping (values stored as float32)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    """Read back a checkpoint as name -> float32 ndarray (bit-exact)."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad checkpoint magic")
    off = len(MAGIC)
    out = {}
    try:
        while off < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            off += 4 * count
            if arr.size != count:
                raise CheckpointError(f"{path}: truncated record for {name!r}")
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
