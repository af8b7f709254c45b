"""DSRM checkpoint container.

Layout (little-endian): ``b"DSRM"``, u32 version, u32 header length, UTF-8
JSON header, then one float32 blob per array in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from dsrlab.errors import FormatError
from dsrlab.nn.core import build
from dsrlab.wavio import atomic_write

MAGIC = b"DSRM"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def encode_checkpoint(model, meta: dict | None = None) -> bytes:
    arrays = model.state_arrays()
    header = {
        "topology": model.config(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + blobs


def save_checkpoint(path, model, meta: dict | None = None) -> None:
    payload = encode_checkpoint(model, meta)
    atomic_write(path, lambda fh: fh.write(payload))


def decode_checkpoint(data: bytes, source="<bytes>"):
    """Return ``(header, [(name, float64 array), ...])``."""
    if len(data) < _PREFIX.size:
        raise FormatError(f"{source}: truncated DSRM prefix")
    magic, version, n_header = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported DSRM version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from exc
    offset = start + n_header
    arrays = []
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(data):
            raise FormatError(f"{source}: truncated blob for {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        arrays.append((entry["name"], arr))
        offset = end
    if offset != len(data):
        raise FormatError(f"{source}: {len(data) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path, rng=None):
    """Rebuild the model recorded in a checkpoint; returns ``(model, meta)``."""
    # importing the model modules registers their types with ``build``
    import dsrlab.jointnet  # noqa: F401
    import dsrlab.rnn  # noqa: F401

    header, arrays = decode_checkpoint(Path(path).read_bytes(), path)
    model = build(header["topology"], rng)
    load_state(model, arrays)
    return model, header.get("meta", {})


def load_state(model, arrays) -> None:
    target = dict(model.state_arrays())
    if set(target) != {n for n, _ in arrays}:
        raise FormatError("checkpoint arrays do not match the model topology")
    for name, value in arrays:
        if target[name].shape != value.shape:
            raise FormatError(f"shape mismatch for {name}: {target[name].shape} vs {value.shape}")
        target[name][...] = value
