"""TGCP checkpoint files.

Layout: magic ``TGCP`` | uint32 version | uint64 header length | UTF-8 JSON
header | raw little-endian tensor payload. Header offsets are relative to
the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..net.params import ModelParams

MAGIC = b"TGCP"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    return "f64" if arr.dtype == np.float64 else "f32"


def encode_checkpoint(params: ModelParams, metrics: dict | None = None) -> bytes:
    arrays = params.state_arrays()
    table, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        table[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "tensors": table,
        "order": list(arrays),
        "backbone": params.backbone.to_dict(),
        "head": params.head.to_dict(),
        "seed": params.seed,
        "metrics": metrics if metrics is not None else params.metrics,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(params: ModelParams, path, metrics: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(params, metrics))
    return path


def decode_checkpoint(blob: bytes) -> ModelParams:
    if len(blob) < _PREFIX.size:
        raise FormatError(f"checkpoint truncated: {len(blob)} bytes is shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if start > len(blob):
        raise FormatError(f"header length {hlen} runs past end of file ({len(blob)} bytes)")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupted header: {exc}") from exc
    payload = memoryview(blob)[start:]
    spans = []
    arrays = {}
    for name in header["order"]:
        ent = header["tensors"][name]
        if ent["dtype"] not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype {ent['dtype']!r}")
        dt = _DTYPES[ent["dtype"]]
        off, nbytes = int(ent["offset"]), int(ent["nbytes"])
        expected = int(np.prod(ent["shape"], dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise FormatError(f"tensor {name!r}: {nbytes} bytes does not match shape {ent['shape']}")
        if off < 0 or off + nbytes > len(payload):
            raise FormatError(f"tensor {name!r} at [{off}, {off + nbytes}) exceeds payload of {len(payload)} bytes")
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(payload[off : off + nbytes], dtype=dt).reshape(ent["shape"])
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"tensors {an!r} and {bn!r} overlap in the payload")
    end = spans[-1][1] if spans else 0
    if end != len(payload):
        raise FormatError(f"payload has {len(payload) - end} trailing bytes")
    return ModelParams.from_state(
        arrays, header["backbone"], header["head"], seed=header["seed"], metrics=header.get("metrics") or {}
    )


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
