"""Named-tensor checkpoint archive.

Layout: ``b"INFD"``, u32 format version, u32 header length, UTF-8 JSON
header, raw little-endian payload. The header maps each tensor name to its
dtype, shape and byte offset within the payload, and carries the model
config plus free-form metadata (training step, RNG state).
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .model.config import ModelConfig
from .model.params import param_shapes

MAGIC = b"INFD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(path, cfg: ModelConfig, params: dict[str, np.ndarray], extra_tensors=None, meta=None) -> None:
    tensors = dict(params)
    for k, v in (extra_tensors or {}).items():
        if k in tensors:
            raise CheckpointError(f"duplicate tensor name {k!r}")
        tensors[k] = v
    index = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index[name] = {"dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"model_config": cfg.to_dict(), "tensors": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for raw in chunks:
            f.write(raw)


def checkpoint_load(path, expected: ModelConfig | None = None):
    """Returns (cfg, params, extra_tensors, meta); validates completeness and layout."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected is not None and cfg != expected:
        raise CheckpointError(f"{path}: checkpoint model config does not match the requested config")
    payload = memoryview(data)[12 + hlen :]
    spans = []
    tensors = {}
    for name, rec in header["tensors"].items():
        start, nbytes = rec["offset"], rec["nbytes"]
        dtype = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r}: size does not match dtype/shape")
        if start < 0 or start + nbytes > len(payload):
            raise CheckpointError(f"tensor {name!r}: payload truncated or offset out of bounds")
        spans.append((start, start + nbytes, name))
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"tensors {n0!r} and {n1!r} overlap")
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name!r}: shape {tensors[name].shape} != expected {shape}")
        params[name] = tensors.pop(name)
    return cfg, params, tensors, header.get("meta", {})
