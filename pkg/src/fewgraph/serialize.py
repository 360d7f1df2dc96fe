"""Flat-vector views of parameter sets and binary array-block I/O.

The block format is a length-prefixed JSON manifest (array names, shapes,
dtypes) followed by the raw little-endian payloads in manifest order, so
round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import IoError

_ALLOWED_DTYPES = {"<f8", "<i8"}


def params_to_vector(arrays) -> np.ndarray:
    """Concatenate arrays into one flat float64 vector."""
    if not arrays:
        return np.empty(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def assign_from_vector(arrays, vec: np.ndarray) -> None:
    """Write `vec` back into the arrays, in order, preserving shapes."""
    pos = 0
    for arr in arrays:
        n = arr.size
        arr[...] = np.asarray(vec[pos : pos + n], dtype=np.float64).reshape(arr.shape)
        pos += n
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, parameters take {pos}")


def write_array_block(fh, named: dict[str, np.ndarray]) -> None:
    entries = []
    payloads = []
    for name, arr in named.items():
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(arr).astype(dtype, copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payloads.append(data.tobytes())
    manifest = json.dumps({"arrays": entries}, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(manifest)))
    fh.write(manifest)
    for blob in payloads:
        fh.write(blob)


def read_array_block(fh) -> dict[str, np.ndarray]:
    raw = fh.read(4)
    if len(raw) != 4:
        raise IoError("truncated array block header")
    (mlen,) = struct.unpack("<I", raw)
    manifest = json.loads(fh.read(mlen).decode("utf-8"))
    out: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise IoError(f"unsupported dtype {dtype!r} in array block")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        blob = fh.read(count * 8)
        if len(blob) != count * 8:
            raise IoError(f"truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=dtype).reshape(shape)
        out[entry["name"]] = arr.astype(np.int64 if dtype == "<i8" else np.float64)
    return out
