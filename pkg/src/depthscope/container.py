"""Little-endian tensor container (safetensors-style).

Layout::

    [0, 8)        uint64 LE header length H
    [8, 8+H)      UTF-8 JSON header, space padded to a multiple of 8
    [8+H, ...)    concatenated little-endian float32 payloads

Each header entry maps a tensor name to
``{"dtype": "f32", "shape": [...], "data_offsets": [begin, end]}`` with
offsets relative to the end of the header.  Keys starting with ``__`` carry
metadata (``__config__`` holds the model config).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ShapeError
from .model import ModelConfig, ModelWeights, expected_shapes

_LE_F32 = np.dtype("<f4")


def write_container(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, object] = None) -> None:
    header: dict = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        if name.startswith("__"):
            raise FormatError(f"tensor name {name!r} is reserved for metadata", name)
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise FormatError(f"tensor {name!r} has dtype {arr.dtype}; the container stores f32 only", name)
        blob = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(blob)]}
        offset += len(blob)
        blobs.append(blob)
    for key, value in (meta or {}).items():
        header[f"__{key.strip('_')}__"] = value
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    """Parse a container; returns ``(tensors, metadata)``.

    Every structural problem raises :class:`FormatError` naming the tensor
    involved; nothing is returned for a partially valid file.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: file too short for the header length field")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise FormatError(f"{path}: header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")

    payload = memoryview(data)[8 + hlen:]
    tensors, meta = {}, {}
    spans = []
    for name, entry in header.items():
        if name.startswith("__") and name.endswith("__"):
            meta[name.strip("_")] = entry
            continue
        try:
            dtype, shape, (begin, end) = entry["dtype"], entry["shape"], entry["data_offsets"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed header entry for tensor {name!r}", name) from None
        if dtype != "f32":
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}", name)
        if not all(isinstance(s, int) and s > 0 for s in shape):
            raise FormatError(f"{path}: tensor {name!r} has invalid shape {shape}", name)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
            raise FormatError(f"{path}: tensor {name!r} has invalid offsets {[begin, end]}", name)
        if end - begin != nbytes:
            raise FormatError(f"{path}: tensor {name!r} spans {end - begin} bytes, shape needs {nbytes}", name)
        if end > len(payload):
            raise FormatError(
                f"{path}: truncated payload: tensor {name!r} ends at byte {end}, payload has {len(payload)}", name
            )
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(payload[begin:end], dtype=_LE_F32).reshape(shape).astype(np.float32)
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise FormatError(f"{path}: tensors {n0!r} and {n1!r} overlap", n1)
    return tensors, meta


def save_weights(weights: ModelWeights, path) -> None:
    write_container(path, weights.tensors, {"config": weights.config.to_dict()})


def load_weights(path) -> ModelWeights:
    tensors, meta = read_container(path)
    if "config" not in meta:
        raise FormatError(f"{path}: header has no __config__ entry")
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: invalid __config__: {exc}") from None
    for name, shape in expected_shapes(cfg).items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}", name)
        if tensors[name].shape != shape:
            raise FormatError(
                f"{path}: shape mismatch for tensor {name!r}: file has {tensors[name].shape}, config requires {shape}",
                name,
            )
    try:
        return ModelWeights(cfg, tensors)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from None
