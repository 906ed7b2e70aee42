"""Binary checkpoint container.

Layout: magic "SGQCKPT1", one version byte, uint32 entry count, then for each
entry a header (uint16 name length, name utf-8, dtype code byte, uint8 rank,
uint32 extents), then the raw little-endian payloads concatenated in index
order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGQCKPT1"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    entries = list(tensors.items())
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(entries))]
    payloads = []
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payloads.append(little.tobytes())
    path.write_bytes(b"".join(chunks + payloads))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    version = raw[8]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 9
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    index = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        index.append((name, _CODE_DTYPES[code], shape))
    out = {}
    for name, dtype, shape in index:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=n, offset=off)
        off += nbytes
        out[name] = arr.astype(dtype).reshape(shape)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out
