"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"PITCKPT\\n"
    4 bytes   format version (uint32), currently 1
    8 bytes   header length L (uint64)
    L bytes   UTF-8 JSON header, keys sorted:
                config   flat run configuration
                epoch    completed epochs
                extra    free-form metadata (class list, logged metrics, ...)
                tensors  list of {"name", "shape", "offset"}; offset counts
                         bytes from the start of the payload
    payload   float64 little-endian row-major data, tensors back to back

Tensor names are prefixed ``param/``, ``buffer/`` or ``optim/``. Identical
inputs produce identical bytes.
"""
import json
import struct

import numpy as np

MAGIC = b"PITCKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, config, tensors, epoch=0, extra=None):
    """Write ``tensors`` (ordered name -> array) with a config echo."""
    table, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8", order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "epoch": int(epoch), "extra": extra or {},
                         "tensors": table}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load(path):
    """Return (header dict, {name: array}) in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a pitreid checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, tensors
