"""Checkpoint container: JSON manifest followed by raw little-endian payloads.

Layout::

    b"STTSCKPT"            8-byte magic
    uint64 little-endian   manifest length in bytes
    manifest               UTF-8 JSON (sorted keys)
    payloads               tensors back to back, in manifest order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"STTSCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4"}


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(payloads)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {manifest.get('format_version')}")
    base = 16 + n
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ParseError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"])
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
