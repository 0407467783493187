"""Single-file checkpoint container.

Layout: magic ``IGCK``, u32 format version, u64 header length, canonical JSON
header (names, shapes, offsets, run metadata), then raw little-endian float32
tensor payloads.  Saving the result of a load reproduces the file byte for
byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"IGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")


def save_checkpoint(path, header: dict, arrays: dict):
    """Write header metadata plus named float32 arrays (sorted by name)."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        blob = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.asarray(arrays[name]).shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    full = dict(header)
    full["tensors"] = entries
    encoded = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(_PREFIX.pack(FORMAT_VERSION, len(encoded)))
        f.write(encoded)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read (header, arrays); corrupt or truncated files fail with the offset."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic bytes", offset=0)
    if len(raw) < 4 + _PREFIX.size:
        raise CheckpointCorruptError(f"{path}: truncated before header length", offset=len(raw))
    version, header_len = _PREFIX.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    header_start = 4 + _PREFIX.size
    if len(raw) < header_start + header_len:
        raise CheckpointCorruptError(f"{path}: truncated inside header", offset=len(raw))
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointCorruptError(f"{path}: malformed header JSON: {e}", offset=header_start) from e
    payload_start = header_start + header_len
    arrays = {}
    for entry in header.pop("tensors", []):
        lo = payload_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointCorruptError(
                f"{path}: tensor '{entry['name']}' extends past end of file", offset=len(raw)
            )
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header, arrays
