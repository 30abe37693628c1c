"""Versioned binary container for named arrays plus a JSON header.

Layout::

    b"STNAS"  format version (uint16 LE)  header length (uint64 LE)
    header: UTF-8 JSON, sorted keys, no whitespace
    payload: arrays back to back, C order, little-endian

The header holds caller metadata under ``"meta"`` and an ``"arrays"`` list of
``{"name", "dtype", "shape"}`` entries in payload order.  Writing the same
content twice produces identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STNAS"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks = [], []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<") else a.dtype
        a = a.astype(dt, copy=False)
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<HQ", FORMAT_VERSION, len(header)), header, *chunks])


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not an stnas container")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<HQ", blob, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos += struct.calcsize("<HQ")
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        arrays[e["name"]] = np.frombuffer(blob[pos:pos + n], dtype=dt).reshape(e["shape"]).copy()
        pos += n
    if pos != len(blob):
        raise FormatError("trailing bytes in container")
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
