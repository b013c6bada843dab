"""LLTD tensor container.

Layout (all integers little-endian)::

    b"LLTD"                      magic
    u8   version                 = 1
    u32  entry count
    per entry:
      u32  name length, then UTF-8 name bytes
      u8   dtype code            1 = float32, 2 = float64
      u8   ndim
      u32  shape[ndim]
      row-major payload          count * itemsize bytes

JSON metadata (checkpoint config, labels, spec echo) travels in a sidecar file
named ``<container>.json``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import LltdError

MAGIC = b"LLTD"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in CODES:
            arr = arr.astype(np.float64)
        code = CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        if arr.ndim > 255:
            raise LltdError("shape_mismatch", f"{name}: too many dimensions")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes, check_finite=False) -> dict:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise LltdError("truncated", f"unexpected end of data reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic") if len(view) >= 4 else b"") != MAGIC:
        raise LltdError("bad_magic", "not an LLTD container")
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise LltdError("bad_version", f"unsupported LLTD version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in DTYPES:
            raise LltdError("bad_dtype", f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        dtype = DTYPES[code]
        count_el = int(np.prod(shape, dtype=np.int64))
        nbytes = count_el * dtype.itemsize
        if pos + nbytes > len(view):
            raise LltdError(
                "shape_mismatch",
                f"{name}: shape {shape} needs {nbytes} payload bytes, only {len(view) - pos} remain",
            )
        arr = np.frombuffer(take(nbytes, f"{name} payload"), dtype=dtype)
        arr = arr.reshape(shape).astype(dtype.newbyteorder("="))
        if check_finite and not np.all(np.isfinite(arr)):
            raise LltdError("non_finite", f"{name}: payload contains NaN or Inf")
        out[name] = arr
    if pos != len(view):
        raise LltdError("shape_mismatch", f"{len(view) - pos} trailing bytes after declared entries")
    return out


def write_lltd(path, tensors: dict, meta: dict | None = None):
    _atomic_write_bytes(path, encode(tensors))
    if meta is not None:
        write_json(sidecar_path(path), meta)


def read_lltd(path, check_finite=False) -> dict:
    return decode(Path(path).read_bytes(), check_finite=check_finite)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_sidecar(path) -> dict | None:
    side = sidecar_path(path)
    if not side.exists():
        return None
    return json.loads(side.read_text())


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_text(path, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))
