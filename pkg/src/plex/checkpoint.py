"""Parameter checkpoint format: JSON manifest + raw little-endian float32.

Layout: magic "PLXC", version byte, u32-LE header length, JSON header with the
config fingerprint and an ordered (name, shape, dtype) list, then each
parameter's bytes in that order. Round-trips are bit-exact for float32 models.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .errors import FormatError
from .nn import Module

MAGIC = b"PLXC"
VERSION = 1


def save_checkpoint(model: Module, path: str, config: Optional[dict] = None) -> None:
    names, blobs, entries = [], [], []
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr.tobytes())
        names.append(name)
    header = {"config": config or {}, "params": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (config, state dict). Validates framing and payload size."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if raw[4] != VERSION:
        raise FormatError(f"{path}: unsupported version {raw[4]} at offset 4")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if 9 + hlen > len(raw):
        raise FormatError(f"{path}: header truncated at offset 9")
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON ({e})") from None
    offset = 9 + hlen
    state = {}
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at offset {offset} ({entry['name']})")
        state[entry["name"]] = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    return header.get("config", {}), state
