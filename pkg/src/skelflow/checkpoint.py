"""Binary checkpoint container for named float64 arrays.

Layout: magic + format version, a JSON index mapping names to shapes and
payload offsets, then the raw little-endian float64 payload. Round-trips
are bit-exact; loading a file with an unknown magic or version fails loudly
instead of guessing.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict

import numpy as np

__all__ = ["save_arrays", "load_arrays", "CheckpointError", "FORMAT_VERSION"]

_MAGIC = b"SKLF"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: Dict[str, np.ndarray]) -> None:
    """Write a name -> float64 array map. Insertion order is preserved."""
    index = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        a = np.array(arr, dtype=np.float64, order="C", copy=True)
        blob = a.astype("<f8", copy=False).tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    meta = json.dumps({"arrays": index}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(meta)))
        f.write(meta)
        for blob in blobs:
            f.write(blob)


def load_arrays(path) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by save_arrays. Bit-exact inverse."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta_len = struct.unpack("<Q", raw[8:16])[0]
    try:
        meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt index ({e})") from None
    payload = raw[16 + meta_len:]
    out: Dict[str, np.ndarray] = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for '{entry['name']}'")
        arr = np.frombuffer(payload[start:end], dtype="<f8").astype(np.float64).reshape(shape)
        out[entry["name"]] = arr
    return out
