"""Bit-exact FOGW checkpoint files.

Layout (all integers unsigned 32-bit little-endian):

    magic "FOGW" | format version | tensor count
    per tensor: name length, UTF-8 name, rank, dims..., raw float32 LE values

Tensors are written in sorted-name order so the same mapping always
produces byte-identical files.  Writes go to a temp file in the target
directory and are renamed into place, so a crash never leaves a corrupt
checkpoint behind.
"""

import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FOGW"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Write a name -> array mapping as a FOGW file (values stored float32)."""
    path = os.fspath(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Read a FOGW file back into a name -> float32 ndarray mapping."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a FOGW checkpoint (bad magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = off + 4 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
            out[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(dims).copy()
            off = end
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
        return out
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from exc
