"""Deterministic tensor blob files (checkpoints, perturbations).

Layout: ``BSKD1\\n``, an 8-byte little-endian header length, a sorted-key JSON
header ``{"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}``,
then the raw little-endian array bytes in header order. No timestamps, so equal
contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BSKD1\n"


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise ValueError("not a tensor blob")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + hlen])
    body = start + hlen
    out = {}
    for e in header["tensors"]:
        lo = body + e["offset"]
        arr = np.frombuffer(data[lo : lo + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        out[e["name"]] = arr.reshape(e["shape"]).copy()
    return out, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
