"""Checkpoint serialization.

Layout: magic "HYBD" | format version (u32 LE) | header length (u64 LE) |
canonical JSON header | raw little-endian float64 payloads.

The header carries the model spec, seed provenance, the training-step counter
and a tensor manifest with byte offsets. Manifest order is deterministic:
globals first (layer -1), then layers ascending, roles lexicographic within a
layer — so identical models serialize to identical bytes.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from . import tensor as tt
from .model import Model, ModelSpec

MAGIC = b"HYBD"
VERSION = 1

_LAYER_KEY = re.compile(r"^layer(\d+)\.(.+)$")


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint data."""


def _sort_key(key: str) -> tuple[int, str]:
    m = _LAYER_KEY.match(key)
    if m:
        return int(m.group(1)), m.group(2)
    return -1, key


def save_bytes(model: Model) -> bytes:
    manifest = []
    offset = 0
    keys = sorted(model.params, key=_sort_key)
    for key in keys:
        arr = model.params[key].data
        nbytes = arr.size * 8
        layer, role = _sort_key(key)
        manifest.append(
            {
                "key": key,
                "layer": layer,
                "role": role,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "step": model.step,
        "manifest": manifest,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(hjson))
    blob += hjson
    for key in keys:
        blob += np.ascontiguousarray(model.params[key].data, dtype="<f8").tobytes()
    return bytes(blob)


def load_bytes(blob: bytes) -> Model:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    spec = ModelSpec.from_dict(header["spec"])
    payload = blob[16 + hlen :]
    params = {}
    for entry in header["manifest"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"truncated payload at {entry['key']}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f8").astype(
            np.float64
        )
        params[entry["key"]] = tt.param(arr.reshape(entry["shape"]))
    return Model(spec, params, header["seed"], header["step"])


def save(model: Model, path) -> None:
    Path(path).write_bytes(save_bytes(model))


def load(path) -> Model:
    return load_bytes(Path(path).read_bytes())
