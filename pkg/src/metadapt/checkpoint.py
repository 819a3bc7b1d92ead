"""Versioned binary container for named arrays plus a JSON metadata blob.

Layout (all integers little-endian):

    magic "MDCK" | u32 version | u32 metadata_len | metadata JSON (utf-8)
    | u32 n_arrays | entries...

    entry: u16 name_len | name utf-8 | u16 dtype_len | dtype str ("<f8")
           | u8 ndim | u32 dim... | raw C-order bytes

Entries are sorted by name and the metadata JSON uses sorted keys, so
save -> load -> save reproduces the file byte for byte. Writes go through
a temp file and ``os.replace`` so readers never see a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"MDCK"
VERSION = 1


def _canonical(arr: np.ndarray) -> np.ndarray:
    # tobytes() emits C-order bytes for any layout; only byte order needs fixing
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_arrays(path: str, metadata: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = _canonical(np.asarray(arrays[name]))
        name_b = name.encode()
        dtype_b = arr.dtype.str.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<H", len(dtype_b)))
        parts.append(dtype_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_arrays(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt metadata block: {e}") from None
    (n_arrays,) = r.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (dtype_len,) = r.unpack("<H")
        dtype = np.dtype(r.take(dtype_len).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after last array")
    return metadata, arrays
