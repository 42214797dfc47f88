"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"XLSTMCKP"
    version      uint32    currently 1
    manifest_len uint64    byte length of the manifest
    manifest     UTF-8 JSON {"config": {...}, "tensors": [
                     {"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    payload      raw little-endian tensor bytes; offsets are relative to
                 the start of the payload

Tensors are written in sorted name order and the JSON is emitted with
sorted keys, so saving the same parameters twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"XLSTMCKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def to_bytes(params: dict[str, np.ndarray], cfg: ModelConfig) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append({
            "name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
            "offset": offset, "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": cfg.to_dict(), "tensors": tensors}, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def from_bytes(blob: bytes, cls=ModelConfig):
    if len(blob) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    cfg = cls(**manifest["config"])
    payload = memoryview(blob)[start + mlen:]
    expected = param_shapes(cfg) if cls is ModelConfig else None
    params = {}
    for t in manifest["tensors"]:
        name, shape = t["name"], tuple(t["shape"])
        if expected is not None:
            if name not in expected:
                raise ShapeMismatchError(f"unexpected tensor {name!r} for this config")
            if expected[name] != shape:
                raise ShapeMismatchError(f"{name}: manifest shape {shape} != config shape {expected[name]}")
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=np.dtype(t["dtype"])).reshape(shape)
        params[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if expected is not None:
        missing = sorted(set(expected) - set(params))
        if missing:
            raise ShapeMismatchError(f"checkpoint lacks tensors {missing}")
    return params, cfg


def save_checkpoint(params: dict[str, np.ndarray], cfg: ModelConfig, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(params, cfg))


def load_checkpoint(path, cls=ModelConfig):
    """Returns ``(params, config)``; raises :class:`ShapeMismatchError` on a bad manifest."""
    with open(path, "rb") as f:
        return from_bytes(f.read(), cls)
