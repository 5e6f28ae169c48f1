"""Byte-stable checkpoint container.

Layout: the magic line, an 8-byte little-endian header length, a JSON header
(sorted keys) and then the raw little-endian float64 payloads the header
points into. No timestamps are written, so equal state gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MODMOE-CKPT-1\n"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = a.tobytes()
        entries[name] = {"shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for name, e in header["arrays"].items():
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, header["meta"]
