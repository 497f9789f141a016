"""Binary checkpoint container for named tensors.

Layout (little-endian, documented in docs/FORMATS.md):

    bytes 0-3    magic b"PLCK"
    bytes 4-7    uint32 format version (currently 1)
    bytes 8-15   uint64 byte length of the JSON index
    index        UTF-8 JSON: {"tensors": {name: {"shape": [...],
                 "dtype": "float64", "offset": int, "trainable": bool}}}
    payload      raw tensor bytes at the stated offsets

Values round-trip bit exactly; optimizer moments are not stored.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .params import ParamStore

MAGIC = b"PLCK"
VERSION = 1


def save_checkpoint(path, store: ParamStore) -> None:
    path = Path(path)
    index: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    # Canonical (sorted) order: equal content always yields equal bytes.
    for name in sorted(store.names()):
        p = store[name]
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        index[name] = {
            "shape": list(p.value.shape),
            "dtype": "float64",
            "offset": offset,
            "trainable": bool(p.trainable),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> ParamStore:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ParseError(f"not a checkpoint file: {path}", line=0)
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", line=0)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    index = json.loads(blob[16 : 16 + hlen].decode("utf-8"))["tensors"]
    payload = blob[16 + hlen :]
    store = ParamStore()
    for name, meta in index.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        store.add(name, arr.reshape(shape).copy(), trainable=meta["trainable"])
    return store


def checkpoint_digest(path) -> str:
    """SHA-256 of the checkpoint file, for freeze-contract checks."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
