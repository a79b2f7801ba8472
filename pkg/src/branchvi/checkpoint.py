"""Flat named-tensor checkpoint files.

Layout (all integers little-endian, documented in the README):
  magic  b"BVNT"
  version  uint32
  count    uint64
  then per tensor, sorted order as written:
    name_len uint32 | name utf-8 | ndim uint32 | shape int64 x ndim |
    payload float64 little-endian, C order
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BVNT"
VERSION = 1


def save_tensors(path, tree: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(tree)))
        for name, arr in tree.items():
            arr = np.asarray(arr, dtype=float)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<q", s))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> dict:
    tree = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(ndim))
            n_vals = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_vals), dtype="<f8")
            tree[name] = data.reshape(shape).copy()
    return tree
