"""Versioned binary container shared by every on-disk artifact.

Layout (all integers little-endian)::

    magic      4 bytes
    version    u16
    reserved   u16
    hdr_len    u32
    header     hdr_len bytes of canonical JSON (metadata + section table)
    sections   raw little-endian array bytes, concatenated in table order
    footer     32-byte SHA-256 of everything above

The header JSON is written with sorted keys and no whitespace so identical
content always serialises to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

_PREAMBLE = struct.Struct("<4sHHI")
_DIGEST = 32


class CorruptFileError(ValueError):
    """Raised when a container is truncated, mis-tagged or fails its checksum."""


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def pack(magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = _le(np.asarray(arrays[name]))
        if arr.dtype == object:
            raise TypeError(f"section {name!r} has object dtype")
        raw = arr.tobytes(order="C")
        table.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = _canonical_json({"meta": meta, "sections": table})
    body = _PREAMBLE.pack(magic, version, 0, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def unpack(data: bytes, magic: bytes, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    if len(data) < _PREAMBLE.size + _DIGEST:
        raise CorruptFileError("file too short to be a container")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError("checksum mismatch (truncated or modified file)")
    got_magic, version, _reserved, hdr_len = _PREAMBLE.unpack_from(body, 0)
    if got_magic != magic:
        raise CorruptFileError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version > max_version:
        raise CorruptFileError(f"unsupported version {version} (max {max_version})")
    start = _PREAMBLE.size
    try:
        header = json.loads(body[start : start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from exc
    base = start + hdr_len
    arrays = {}
    for sec in header["sections"]:
        lo = base + sec["offset"]
        hi = lo + sec["nbytes"]
        if hi > len(body):
            raise CorruptFileError(f"section {sec['name']!r} runs past end of file")
        dtype = np.dtype(sec["dtype"])
        n = int(np.prod(sec["shape"], dtype=np.int64))
        if n * dtype.itemsize != sec["nbytes"]:
            raise CorruptFileError(f"section {sec['name']!r} size does not match its shape")
        if n == 0:
            arr = np.empty(sec["shape"], dtype=dtype)
        else:
            arr = np.frombuffer(body, dtype=dtype, count=n, offset=lo).reshape(sec["shape"]).copy()
        arrays[sec["name"]] = arr
    return version, header["meta"], arrays


def write(path: str | Path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    data = pack(magic, version, meta, arrays)
    Path(path).write_bytes(data)
    return data


def read(path: str | Path, magic: bytes, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), magic, max_version)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
