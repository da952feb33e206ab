"""Deterministic binary container: magic, version, JSON header, raw arrays.

Layout::

    4 bytes   magic
    u16       format version (little endian)
    u32       header length in bytes
    header    UTF-8 JSON, keys sorted; ``arrays`` lists name/dtype/shape/offset
    payload   concatenated C-order array bytes

Nothing time- or platform-dependent is written, so identical inputs give
identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np


class BlobFormatError(ValueError):
    pass


def dumps(magic: bytes, version: int, header: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<") else a.dtype
        a = a.astype(dt, copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = dict(header)
    head["arrays"] = entries
    hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<HI", version, len(hbytes)) + hbytes + b"".join(chunks)


def loads(data: bytes, magic: bytes, versions: Tuple[int, ...]) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != magic:
        raise BlobFormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < 10:
        raise BlobFormatError("truncated header")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version not in versions:
        raise BlobFormatError(f"unsupported format version {version} (supported: {versions})")
    try:
        header = json.loads(data[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobFormatError(f"corrupt header: {exc}") from exc
    base = 10 + hlen
    arrays = {}
    for e in header.pop("arrays"):
        start = base + e["offset"]
        chunk = data[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise BlobFormatError(f"array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    header["format_version"] = version
    return header, arrays


def write(path, magic: bytes, version: int, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, version, header, arrays))


def read(path, magic: bytes, versions: Tuple[int, ...]):
    return loads(Path(path).read_bytes(), magic, versions)
