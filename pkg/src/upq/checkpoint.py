"""Bit-exact binary container: magic ``UPQC``, u32 version, length-prefixed
JSON config, then named float32 little-endian tensors.

Used for model checkpoints (``.upqc``) and cached packed datasets.  The JSON
config is serialized canonically (sorted keys, no whitespace), so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np

from .errors import FormatError

MAGIC = b"UPQC"
VERSION = 1


def write_container(path, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_container(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset: int, count: int) -> bytes:
        if offset + count > len(blob):
            raise FormatError("truncated container", offset=offset)
        return blob[offset : offset + count]

    if need(0, 4) != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    (version,) = struct.unpack("<I", need(4, 4))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (config_len,) = struct.unpack("<I", need(8, 4))
    try:
        config = json.loads(need(12, config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad config JSON: {e}", offset=12) from e
    off = 12 + config_len
    (count,) = struct.unpack("<I", need(off, 4))
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(off, 4))
        name = need(off + 4, name_len).decode("utf-8")
        off += 4 + name_len
        (ndim,) = struct.unpack("<I", need(off, 4))
        shape = struct.unpack(f"<{ndim}I", need(off + 4, 4 * ndim))
        off += 4 + 4 * ndim
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(need(off, nbytes), dtype="<f4").reshape(shape)
        off += nbytes
        tensors[name] = data.copy()
    if off != len(blob):
        raise FormatError("trailing bytes after tensor table", offset=off)
    return config, tensors
