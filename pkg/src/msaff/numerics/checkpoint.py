"""Parameter checkpoint files.

Layout::

    [8 bytes]  header length L, unsigned little-endian
    [L bytes]  UTF-8 JSON: {"format": "msaff-params", "version": 1,
                            "params": {name: {"shape": [...], "offset": int}},
                            "meta": {...}}
    [rest]     float64 little-endian values, row-major, concatenated

``offset`` is the byte offset of each array from the start of the data block.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ParseError

FORMAT = "msaff-params"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    entries = {}
    offset = 0
    arrays = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype=_LE_F64)
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
        arrays.append(arr)
    header = json.dumps(
        {"format": FORMAT, "version": VERSION, "params": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for arr in arrays:
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ParseError("checkpoint truncated before header length", 0)
        (length,) = struct.unpack("<Q", raw)
        body = fh.read(length)
    if len(body) != length:
        raise ParseError("checkpoint truncated inside header", 8 + len(body))
    try:
        header = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header is not JSON: {exc}", 8) from exc
    if header.get("format") != FORMAT:
        raise ParseError(f"not an msaff checkpoint (format={header.get('format')!r})", 8)
    header["_data_start"] = 8 + length
    return header


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, meta)``."""
    header = read_header(path)
    start = header["_data_start"]
    blob = Path(path).read_bytes()[start:]
    params = {}
    for name, entry in header["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + count * 8
        if hi > len(blob):
            raise ParseError(f"parameter {name!r} runs past end of file", start + lo)
        params[name] = np.frombuffer(blob[lo:hi], dtype=_LE_F64).reshape(shape).astype(np.float64)
    return params, header.get("meta", {})
