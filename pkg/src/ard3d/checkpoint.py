"""Checkpoint container: JSON manifest + raw little-endian float32 blobs.

Layout on disk:
    bytes 0..4    magic b"ARDC"
    bytes 4..8    format version, uint32 LE
    bytes 8..16   manifest length in bytes, uint64 LE
    manifest      canonical JSON (sorted keys, no whitespace)
    blobs         tensor data, float32 LE, in manifest order

The manifest records per-tensor shape and byte offset into the blob
region plus an arbitrary JSON ``meta`` section for configs and counters.
Canonical JSON and sorted tensor names make save -> load -> save
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ARDC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(tensors)
    entries = {}
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    manifest = {"version": VERSION, "tensors": entries, "meta": meta}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (tensors, meta). Raises CheckpointError on bad files."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest") from e
    blob = raw[16 + mlen:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated for tensor {name!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)  # copy, writable
    return tensors, manifest["meta"]
