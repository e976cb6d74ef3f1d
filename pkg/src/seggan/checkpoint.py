"""Single-file binary checkpoints.

Layout: magic "SEGGAN1\\0", an unsigned little-endian 64-bit byte length,
that many bytes of UTF-8 JSON (the header), then raw little-endian float64
buffers at the offsets the header's manifest declares (relative to the end
of the header). Buffers are stored in float64 regardless of the training
precision; float32 values survive the widening round trip bitwise.

Writes go to a temporary file in the same directory followed by an atomic
rename, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import pathlib
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"SEGGAN1\x00"


def write_checkpoint(path, header: dict, buffers):
    """buffers: iterable of (name, ndarray); order defines the manifest."""
    path = pathlib.Path(path)
    manifest = []
    blobs = []
    offset = 0
    for name, arr in buffers:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    full_header = dict(header)
    full_header["manifest"] = manifest
    raw = json.dumps(full_header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (header, {name: float64 ndarray})."""
    path = pathlib.Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path} is truncated")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    hstart = len(MAGIC) + 8
    if len(blob) < hstart + hlen:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a malformed header: {e}") from e
    data_start = hstart + hlen
    buffers = {}
    for entry in header.get("manifest", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path} is truncated inside buffer {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
        buffers[entry["name"]] = arr.astype(np.float64)  # writable copy
    return header, buffers
