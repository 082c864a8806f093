"""Single-file parameter archive.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(format version, precision, ordered name/shape table), then the raw
little-endian payloads concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"LWPARAMS"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_params(path, params: dict[str, Tensor | np.ndarray], dtype: str | None = None):
    """Write parameters sorted by name. `dtype` overrides stored precision."""
    items = sorted(params.items())
    arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for _, p in items]
    if dtype is None:
        dtype = "float64" if any(a.dtype == np.float64 for a in arrays) else "float32"
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported precision {dtype!r}")
    header = {
        "format": FORMAT_VERSION,
        "precision": dtype,
        "params": [{"name": name, "shape": list(a.shape)} for (name, _), a in zip(items, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a parameter archive (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported archive format {header.get('format')}")
        np_dtype = _DTYPES[header["precision"]]
        out = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * np.dtype(np_dtype).itemsize)
            out[entry["name"]] = np.frombuffer(buf, dtype=np_dtype).reshape(shape).copy()
        return out
