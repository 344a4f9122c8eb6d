"""Flat checkpoint container for named float64 arrays.

Layout::

    b"NCKPT\\x00\\x01\\x00"          8-byte magic
    uint64 little-endian            manifest length in bytes
    manifest                        UTF-8 JSON
    data                            concatenated little-endian float64 arrays

The manifest lists ``name``, ``shape``, ``offset`` and ``nbytes`` for every
array (offsets relative to the start of the data block), a CRC32 of the data
block, and an optional free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NCKPT\x00\x01\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, "arrays": entries,
                "crc32": zlib.crc32(data), "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + data


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint header")
    (head_len,) = struct.unpack("<Q", blob[8:16])
    head = blob[16:16 + head_len]
    if len(head) != head_len:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    data = blob[16 + head_len:]
    expected = sum(e["nbytes"] for e in manifest["arrays"])
    if len(data) != expected:
        raise CheckpointError(f"truncated data block: {len(data)} of {expected} bytes")
    if zlib.crc32(data) != manifest["crc32"]:
        raise CheckpointError("checksum mismatch in data block")
    arrays = {}
    for e in manifest["arrays"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, manifest["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
