"""
Checkpoint file format (version 1).

Layout, all integers little-endian::

    offset 0   8 bytes   magic  b"IRFCKPT\\0"
    offset 8   uint32    format version (= 1)
    offset 12  uint64    header length L in bytes
    offset 20  L bytes   UTF-8 JSON header, keys sorted:
                           {"meta": {...}, "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    offset 20+L          float64 little-endian payload: every tensor's values,
                         row-major, concatenated in header order

``meta`` is free-form JSON (the model stores its ``ModelConfig`` under
``meta["model_config"]``).  Writing the same tensors and meta twice yields
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from irformer.errors import ContractError

MAGIC = b"IRFCKPT\x00"
VERSION = 1

PathLike = Union[str, Path]


def save_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not an irformer checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing payload bytes")
    return tensors, header["meta"]
