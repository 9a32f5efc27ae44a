"""Binary checkpoint format.

Layout: magic string, format version, a JSON metadata blob (the resolved
experiment configuration plus the training step), then one record per
parameter: length-prefixed UTF-8 name, dtype tag (0 = float32, 1 = float64),
rank, shape, and the little-endian IEEE-754 payload.  Loading verifies every
shape against the freshly built model and fails on any mismatch.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"FNTCKPT\x00"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _TAG_FOR:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, blob_len, "metadata").decode("utf-8"))
        (n_records,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "shape"))
            dtype = _DTYPE_TAGS[tag]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = _read_exact(f, n_bytes, f"payload of {name}")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        return meta, arrays
