"""Checkpoint container: named arrays plus a JSON header, raw little-endian.

Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header,
then the concatenated raw array payloads.  The header carries arbitrary
metadata (model config, training stage, iteration, init scheme) and one
entry per array with name/shape/dtype/offset.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LIVERSEG-CKPT-1\n"


def save_arrays(path, arrays, meta=None):
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_arrays(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    total = sum(e["nbytes"] for e in header["entries"])
    actual = len(blob) - base
    if actual != total:
        raise ValueError(f"{path}: payload is {actual} bytes, header expects {total}")
    arrays = {}
    for e in header["entries"]:
        raw = blob[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.dtype(e["dtype"]).newbyteorder("="), copy=True)
    return arrays, header["meta"]
