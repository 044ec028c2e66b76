"""Binary checkpoint format.

Layout::

    b"LGRCKPT1"                     8-byte magic (format version 1)
    uint64 little-endian            manifest length in bytes
    manifest                        UTF-8 JSON: {"meta": {...}, "entries": [
                                      {"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    data                            raw little-endian arrays; offsets are
                                    relative to the start of this section
"""

import json
import struct

import numpy as np

from lgrnet.errors import ParseError

MAGIC = b"LGRCKPT1"


def save_checkpoint(path, state, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(state, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ParseError("not an LGRCKPT1 checkpoint", path=path)
    if len(blob) < 16:
        raise ParseError("truncated header", path=path)
    (mlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad manifest: {exc}", path=path) from exc
    base = 16 + mlen
    state = {}
    for e in manifest["entries"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(blob):
            raise ParseError(f"entry {e['name']} runs past end of file", path=path)
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return state, manifest.get("meta", {})
