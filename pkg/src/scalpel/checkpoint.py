"""Binary container shared by model and adapter checkpoints.

Layout::

    b"SCLP" | u16 version | u32 manifest length | manifest (UTF-8 JSON) | payload

The manifest is ``{"meta": {...}, "tensors": [{"name", "shape", "offset", "count"}]}``
with offsets in bytes from the start of the payload. The payload is raw
little-endian float32 data, tensors back to back in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"SCLP"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_FLOAT = np.dtype("<f4")


def encode(tensors: Mapping[str, np.ndarray], meta: dict) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_FLOAT).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    blob = manifest.encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < _HEADER.size:
        raise CorruptionError(f"checkpoint truncated: {len(buf)} bytes is shorter than the header")
    magic, version, mlen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (reader is version {VERSION})")
    start = _HEADER.size + mlen
    if start > len(buf):
        raise CorruptionError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(buf[_HEADER.size:start].decode("utf-8"))
        meta, entries = manifest["meta"], manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable manifest: {exc}") from exc

    payload = memoryview(buf)[start:]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for e in entries:
        try:
            name, shape, off, count = e["name"], tuple(e["shape"]), int(e["offset"]), int(e["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError(f"malformed manifest entry {e!r}") from exc
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CorruptionError(f"tensor {name!r}: shape {list(shape)} disagrees with count {count}")
        if off != expected:
            raise CorruptionError(f"tensor {name!r}: offset {off} is not contiguous (expected {expected})")
        end = off + count * _FLOAT.itemsize
        if end > len(payload):
            raise CorruptionError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(payload[off:end], dtype=_FLOAT).reshape(shape).copy()
        expected = end
    if expected != len(payload):
        raise CorruptionError(f"{len(payload) - expected} trailing bytes after last tensor")
    return meta, tensors


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    """Write atomically so a crash never leaves a half-written checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
