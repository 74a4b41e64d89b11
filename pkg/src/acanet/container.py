"""Self-describing binary container for named float arrays.

Layout::

    b"ACANETC\\0"                magic (8 bytes)
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON: format version, kind, metadata,
                                 and for each array its name, shape, dtype
                                 ("<f4"), byte offset and byte length
    payload                      concatenated little-endian float32 data

Headers are written with sorted keys and no whitespace so identical content
always serializes to identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["ContainerError", "FORMAT_VERSION", "MAGIC", "read_container", "write_container"]

MAGIC = b"ACANETC\0"
FORMAT_VERSION = 1
DTYPE = "<f4"


class ContainerError(ValueError):
    """The file is not a valid container."""


def _encode(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE)).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": DTYPE, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"version": FORMAT_VERSION, "kind": kind, "meta": dict(meta or {}), "arrays": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Atomically write ``arrays`` (cast to float32) with ``meta`` to ``path``."""
    path = Path(path)
    payload = _encode(kind, arrays, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; raises :class:`ContainerError` on any inconsistency."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not an acanet container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {header.get('version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    payload = memoryview(raw)[16 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        try:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"{path}: malformed array entry {entry!r}") from exc
        if dtype != DTYPE:
            raise ContainerError(f"{path}: array {name!r} has unsupported dtype {dtype!r}")
        expected = int(np.prod(shape)) * 4
        if nbytes != expected or start < 0 or start + nbytes > len(payload):
            raise ContainerError(f"{path}: array {name!r} payload is truncated or inconsistent with shape {shape}")
        arrays[name] = np.frombuffer(payload[start : start + nbytes], dtype=DTYPE).reshape(shape).astype(np.float32)
    return arrays, header.get("meta", {})
