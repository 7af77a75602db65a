"""Named-parameter checkpoints: one text header line plus a little-endian float64 payload."""
from __future__ import annotations

import json

import numpy as np

MAGIC = b"TRIPLETLAB-CHECKPOINT v1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_arrays, meta=None):
    tensors, blobs, offset = [], [], 0
    for name, arr in named_arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": tensors}, sort_keys=True,
                        separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    payload = data[end + 1:]
    arrays = {}
    for t in header["tensors"]:
        if t["offset"] + t["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f8", count=n,
                                          offset=t["offset"]).reshape(t["shape"]).copy()
    return arrays, header["meta"]
