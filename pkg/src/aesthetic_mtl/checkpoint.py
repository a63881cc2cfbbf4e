"""Checkpoint container.

Layout (version 1)::

    b"AMTLCKPT\\n"
    one line of JSON (sorted keys, UTF-8) terminated by b"\\n":
        {"format_version": 1,
         "arch": {...Architecture fields...},
         "arrays": [{"name": str, "length": int}, ...],
         "meta": {...free-form JSON...}}
    the arrays, in header order, as raw little-endian float64

The first arrays are always ``shared`` then ``head_0`` .. ``head_{T-1}``;
optional extras (e.g. ``momentum``) follow. No timestamps are written, so
saving the same state twice gives identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .nn_core import Architecture, ModelParams

MAGIC = b"AMTLCKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def to_bytes(params: ModelParams, meta: dict | None = None, extras: dict | None = None) -> bytes:
    arrays = [("shared", params.shared)] + [(f"head_{t}", h) for t, h in enumerate(params.heads)]
    for name, arr in sorted((extras or {}).items()):
        arrays.append((name, np.asarray(arr, dtype=float).ravel()))
    header = {
        "format_version": FORMAT_VERSION,
        "arch": params.arch.to_dict(),
        "arrays": [{"name": n, "length": int(a.size)} for n, a in arrays],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + head + b"\n" + body


def from_bytes(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise InvalidInputError("not a checkpoint file (bad magic)")
    end = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {header.get('format_version')!r}")
    arch = Architecture.from_dict(header["arch"])
    pos = end + 1
    arrays = {}
    for spec in header["arrays"]:
        n = spec["length"] * 8
        if pos + n > len(blob):
            raise InvalidInputError("checkpoint truncated")
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=spec["length"], offset=pos).astype(float)
        pos += n
    if pos != len(blob):
        raise InvalidInputError("trailing bytes after checkpoint arrays")
    params = ModelParams(arch, arrays.pop("shared"), [arrays.pop(f"head_{t}") for t in range(arch.n_tasks)])
    return Checkpoint(params, header["meta"], arrays)


def save_checkpoint(path, params: ModelParams, meta: dict | None = None, extras: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(params, meta, extras))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
