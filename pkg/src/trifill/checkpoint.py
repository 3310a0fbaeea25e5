"""Binary checkpoint container: named arrays plus a small text meta block.

Layout (little-endian):

    magic  b"TRIC" | u32 version | u32 meta_len | meta utf-8
    u32 array_count
    per array: u16 name_len | name utf-8 | u8 dtype code | u8 ndim
               | u32 * ndim extents | raw C-order bytes
    u32 crc32 of everything after the magic

Arrays are written in sorted-name order, so identical states produce
byte-identical files. Writes go to a temp file in the same directory and
are renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"TRIC"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "|u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _encode_meta(meta):
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    return "\n".join(lines).encode("utf-8")


def _decode_meta(blob):
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        meta[key] = value
    return meta


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays atomically; `meta` is a str -> str mapping."""
    parts = [struct.pack("<I", VERSION)]
    mb = _encode_meta(meta or {})
    parts.append(struct.pack("<I", len(mb)))
    parts.append(mb)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name])  # .tobytes() below is C-order regardless
        code = _CODES.get(a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype)
        if code is None:
            raise ValueError(f"unsupported checkpoint dtype {a.dtype} for {name!r}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype(_DTYPES[code], copy=False).tobytes())
    payload = b"".join(parts)
    blob = MAGIC + payload + struct.pack("<I", zlib.crc32(payload))

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path):
    """Read a container back as (arrays, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container (bad magic)")
    if len(blob) < 8:
        raise ValueError(f"{path}: checksum failure (truncated)")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: checksum failure")
    off = 0
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"{path}: container version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    meta = _decode_meta(payload[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        size = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if ndim else dt.itemsize
        arrays[name] = np.frombuffer(payload[off:off + size], dtype=dt).reshape(shape).copy()
        off += size
    return arrays, meta
