"""Binary checkpoint format for named float64 arrays.

Layout (all integers little-endian)::

    magic      5 bytes   b"DLAB1"
    version    u32       currently 1
    then, repeated until EOF, one record per parameter:
    name_len   u32
    name       name_len bytes, UTF-8
    rank       u32
    extents    rank x u64
    payload    prod(extents) x f64, row-major

A model checkpoint ``foo.bin`` is paired with ``foo.json`` holding the
model spec.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"DLAB1"
VERSION = 1


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise DataError(f"{path}: not a DLAB1 checkpoint")
    (version,) = struct.unpack_from("<I", buf, 5)
    if version != VERSION:
        raise DataError(f"{path}: checkpoint version {version} unsupported (expected {VERSION}); re-save it")
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def save_json(path: str | os.PathLike, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
