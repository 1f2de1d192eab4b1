"""Versioned binary tensor container shared by model checkpoints.

Layout (little-endian)::

    magic (4 bytes) | version u32 | header length u32 | header (UTF-8 JSON) | tensor payloads

The JSON header lists every tensor as ``{"name", "enc", "shape", ...}`` in
payload order. Encodings:

* ``f32``   -- float32 values, row-major; ``4 * size`` bytes
* ``q8``    -- float64 min, float64 bin width, then one uint8 bin index per entry
* ``codes`` -- bit-packed integer codes (see :mod:`nlucompress.dccl`), ``"K"`` in the entry
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from .errors import FormatError

CONTAINER_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def tensor_nbytes(entry: dict) -> int:
    size = int(np.prod(entry["shape"], dtype=np.int64))
    if entry["enc"] == "f32":
        return 4 * size
    if entry["enc"] == "q8":
        return 16 + size
    if entry["enc"] == "codes":
        from .dccl import bits_per_code
        return math.ceil(size * bits_per_code(entry["K"]) / 8)
    raise FormatError(f"unknown tensor encoding {entry['enc']!r}")


def encode_tensor(entry: dict, value) -> bytes:
    enc = entry["enc"]
    if enc == "f32":
        return np.asarray(value, dtype="<f4").tobytes()
    if enc == "q8":
        q = value
        return struct.pack("<dd", q.min, q.bin_width) + q.data.astype(np.uint8).tobytes()
    if enc == "codes":
        from .dccl import pack_codes
        return pack_codes(value)
    raise FormatError(f"unknown tensor encoding {enc!r}")


def decode_tensor(entry: dict, raw: bytes):
    enc, shape = entry["enc"], tuple(entry["shape"])
    if enc == "f32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if enc == "q8":
        from .quant8 import QuantizedMatrix
        lo, width = struct.unpack_from("<dd", raw, 0)
        data = np.frombuffer(raw, dtype=np.uint8, offset=16).copy().reshape(shape)
        return QuantizedMatrix(data=data, min=lo, bin_width=width, bins=entry.get("bins", 256))
    if enc == "codes":
        from .dccl import unpack_codes
        return unpack_codes(raw, shape[0], shape[1], entry["K"])
    raise FormatError(f"unknown tensor encoding {enc!r}")


def pack(magic: bytes, header: dict, tensors: list[tuple[dict, object]]) -> bytes:
    header = dict(header)
    header["tensors"] = [entry for entry, _ in tensors]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(magic, CONTAINER_VERSION, len(head)), head]
    for entry, value in tensors:
        raw = encode_tensor(entry, value)
        if len(raw) != tensor_nbytes(entry):
            raise FormatError(f"tensor {entry['name']}: encoded {len(raw)} bytes, expected {tensor_nbytes(entry)}")
        parts.append(raw)
    return b"".join(parts)


def unpack(data: bytes, magic: bytes) -> tuple[dict, dict]:
    """Return ``(header, {name: decoded tensor})``."""
    if len(data) < _PREFIX.size:
        raise FormatError("truncated container prefix")
    got, version, head_len = _PREFIX.unpack_from(data, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = _PREFIX.size
    if len(data) < off + head_len:
        raise FormatError("truncated container header")
    try:
        header = json.loads(data[off:off + head_len].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt container header: {exc}") from None
    off += head_len
    tensors = {}
    for entry in header.get("tensors", []):
        n = tensor_nbytes(entry)
        if len(data) < off + n:
            raise FormatError(f"truncated tensor {entry['name']}")
        tensors[entry["name"]] = decode_tensor(entry, data[off:off + n])
        off += n
    if off != len(data):
        raise FormatError("trailing bytes after last tensor")
    return header, tensors


def section_sizes(data: bytes, magic: bytes) -> tuple[int, dict]:
    """Byte count of the prefix+header and of every tensor, summing to ``len(data)``."""
    header, _ = unpack(data, magic)
    _, _, head_len = _PREFIX.unpack_from(data, 0)
    return _PREFIX.size + head_len, {e["name"]: tensor_nbytes(e) for e in header["tensors"]}
