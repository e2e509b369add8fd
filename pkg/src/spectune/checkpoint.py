"""Checkpoint container.

Layout (all integers little-endian)::

    b"SPCK"            4-byte magic
    uint32             format version (currently 1)
    uint64             header length H
    H bytes            UTF-8 JSON header
    payload            raw float64 tensors, concatenated in header order

The header is ``{"version", "meta", "tensors"}`` where each tensor entry has
``name``, ``shape``, ``dtype`` (always ``"<f8"``), ``offset`` (bytes into the
payload) and ``trainable``. Keys are sorted, so identical contents give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"SPCK"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    trainable: set[str] = field(default_factory=set)
    meta: dict[str, Any] = field(default_factory=dict)

    def delta(self) -> dict[str, np.ndarray]:
        """Only the tensors that were optimised in the run that wrote this checkpoint."""
        return {k: v for k, v in self.tensors.items() if k in self.trainable}


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "trainable": name in ckpt.trainable})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": VERSION, "meta": ckpt.meta, "tensors": entries},
                        sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    payload = memoryview(raw)[16 + hlen:]
    tensors, trainable = {}, set()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=e["dtype"], count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        if e["trainable"]:
            trainable.add(e["name"])
    return Checkpoint(tensors, trainable, header["meta"])


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())
