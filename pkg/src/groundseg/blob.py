"""
Self-describing binary container used for pillar tensors and checkpoints.

Layout::

    magic (4 bytes) | header length (uint32 LE) | JSON header (utf-8) | payload

The header lists every array as ``{"name", "dtype", "shape", "offset"}`` plus
free-form metadata.  All numeric payloads are little-endian.  Writes go to a
temporary file that is renamed into place, so a crash never leaves a
valid-looking partial file.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError


def write_blob(path: str | os.PathLike, magic: bytes, arrays: Mapping[str, np.ndarray],
               meta: Mapping[str, Any] | None = None) -> None:
    assert len(magic) == 4
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True,
                        separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_blob(path: str | os.PathLike, magic: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    base = 8 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + count * dt.itemsize > len(raw):
            raise FormatError(f"{path}: array {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(raw, dt, count, start).reshape(e["shape"]).copy()
    return arrays, header["meta"]
