"""Binary parameter container.

Layout (all little-endian, documented here and stable across runs):

    magic   4 bytes  b"MVCK"
    version uint32   currently 1
    count   uint32   number of records
    then per record:
        name_len uint16, name utf-8 bytes
        ndim     uint16, dims uint32 * ndim
        values   float64 * prod(dims)

Records are written in sorted-name order so identical state produces
identical bytes (the determinism check diffs checkpoint files directly).
Writes go through a temp file + rename so a crash never leaves a torn file.
"""

import os
import struct

import numpy as np

MAGIC = b"MVCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save(path, arrays):
    """Write {name: ndarray} atomically to `path`."""
    items = sorted(arrays.items())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order regardless
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<H", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load(path):
    """Read a checkpoint back into {name: ndarray}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<H", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            off += 8 * n
            out[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt ({e})") from e
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
