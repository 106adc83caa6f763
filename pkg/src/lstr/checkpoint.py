"""Versioned binary container: JSON header followed by raw float64 tensors.

Layout::

    b"LSTRCKPT"  magic (8 bytes)
    uint32 LE    format version
    uint64 LE    header length in bytes
    header       UTF-8 JSON: {"meta": ..., "tensors": [[name, shape], ...],
                              "payload_bytes": n, "sha256": hex}
    payload      little-endian float64 tensors, in header order, C order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LSTRCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    pass


def write_container(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    chunks = []
    index = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        index.append([name, list(a.shape)])
        chunks.append(a.tobytes())
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta, "tensors": index, "payload_bytes": len(payload),
         "sha256": hashlib.sha256(payload).hexdigest()},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not an LSTR checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    if 20 + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = raw[20 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"truncated payload: {len(payload)} of {header['payload_bytes']} bytes")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload checksum mismatch")
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    return header["meta"], tensors
