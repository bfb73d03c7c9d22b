"""ELPO tensor container: a small checksummed binary format for named arrays.

Layout (all integers little-endian)::

    magic      4 bytes   b"ELPO"
    version    u16       currently 1
    count      u32       number of entries
    entries    count x { name_len u16, name utf-8, dtype u8, ndim u8,
                         dims u64 * ndim, offset u64 }
    payload    raw little-endian array bytes, each entry 8-byte aligned;
               ``offset`` is the absolute file position of its first byte
    crc32      u32       zlib CRC-32 of every preceding byte

dtype tags: 0 = float64, 1 = float32, 2 = int64, 3 = uint8. A JSON manifest,
if present, is stored as a uint8 entry named ``__manifest__``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"ELPO"
VERSION = 1
MANIFEST_KEY = "__manifest__"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class ContainerError(ValueError):
    """Malformed, truncated or corrupted container."""


def _normalize(arr) -> tuple[int, np.ndarray]:
    a = np.asarray(arr)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    elif a.dtype.kind in "iu" and a.dtype != np.uint8:
        a = a.astype(np.int64)
    elif a.dtype.kind == "f" and a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    tag = _TAGS.get(a.dtype.newbyteorder("=") if a.dtype.byteorder not in "=|" else a.dtype)
    if tag is None:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    # ascontiguousarray would promote 0-d arrays to 1-d
    return tag, np.ascontiguousarray(a, dtype=_DTYPES[tag]).reshape(a.shape)


def encode(arrays: dict, manifest: dict | None = None) -> bytes:
    items = dict(arrays)
    if manifest is not None:
        items[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    norm = []
    for name in items:
        if not isinstance(name, str) or not name:
            raise ContainerError("entry names must be non-empty strings")
        tag, a = _normalize(items[name])
        norm.append((name, tag, a))
    header = bytearray(MAGIC + struct.pack("<HI", VERSION, len(norm)))
    table_size = sum(2 + len(n.encode()) + 2 + 8 * a.ndim + 8 for n, _, a in norm)
    pos = len(header) + table_size
    offsets = []
    for _, _, a in norm:
        pos = (pos + 7) // 8 * 8
        offsets.append(pos)
        pos += a.nbytes
    for (name, tag, a), off in zip(norm, offsets):
        nb = name.encode()
        header += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, a.ndim)
        header += struct.pack(f"<{a.ndim}Q", *a.shape) + struct.pack("<Q", off)
    buf = bytearray(header)
    for (_, _, a), off in zip(norm, offsets):
        buf += b"\0" * (off - len(buf))
        buf += a.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def decode(data: bytes) -> tuple[dict, dict | None]:
    """Parse a container; returns ``(arrays, manifest)``."""
    if len(data) < 14:
        raise ContainerError("file too short")
    if data[:4] != MAGIC:
        raise ContainerError("bad magic bytes")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    pos = 10
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (off,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            entries.append((name, tag, dims, off))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ContainerError(f"corrupt entry table: {exc}") from None
    arrays = {}
    spans = []
    for name, tag, dims, off in entries:
        if tag not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype tag {tag}")
        if name in arrays:
            raise ContainerError(f"duplicate entry {name!r}")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off < pos or off + nbytes > len(body):
            raise ContainerError(f"entry {name!r}: payload out of bounds")
        spans.append((off, off + nbytes, name))
        arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ContainerError(f"entries {n0!r} and {n1!r} overlap")
    manifest = None
    if MANIFEST_KEY in arrays:
        try:
            manifest = json.loads(arrays.pop(MANIFEST_KEY).tobytes().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"bad manifest: {exc}") from None
    return arrays, manifest


def write(path, arrays: dict, manifest: dict | None = None) -> None:
    data = encode(arrays, manifest)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path) -> tuple[dict, dict | None]:
    with open(path, "rb") as fh:
        return decode(fh.read())
