"""Versioned checkpoint container.

Layout (all integers little-endian):

    bytes 0..15   magic ``CHEXGRAPH-CKPT\\n`` + format version byte
    bytes 16..23  uint64 header length L
    next L bytes  UTF-8 JSON header: epoch, config, rng state, and an
                  ordered array directory of (name, shape, dtype)
    remainder     raw C-order array payloads, concatenated in directory order

Parameters are stored as raw 32-bit floats (or whatever dtype the model was
built with); saving the same state twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CHEXGRAPH-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict,
                    epoch: int, rng_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    directory = [{"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
                 for name, arr in arrays.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "epoch": epoch,
        "config": config,
        "rng_state": rng_state,
        "extra": extra or {},
        "arrays": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def load_checkpoint(path):
    """Returns (arrays, header) or refuses on magic/version mismatch."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version} is not "
                                  f"supported (expected {FORMAT_VERSION})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return arrays, header
