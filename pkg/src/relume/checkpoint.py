"""Binary checkpoints of a :class:`FieldSet`.

Layout (little-endian)::

    b"RELUMECK"  uint32 version  uint32 meta_len  meta (UTF-8 JSON)
    uint32 tensor_count
    per tensor: uint16 name_len, name, uint8 ndim, uint32 dims[ndim], float32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .fields import FieldConfig, FieldSet

MAGIC = b"RELUMECK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, fields: FieldSet, meta: dict | None = None):
    meta = dict(meta or {})
    meta["field_config"] = fields.config.to_dict()
    blob = json.dumps(meta, sort_keys=True).encode()
    state = fields.state_dict()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            key = name.encode()
            f.write(struct.pack("<H", len(key)) + key)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[FieldSet, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(data[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            state[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    cfg = FieldConfig(**meta["field_config"])
    fields = FieldSet(cfg)
    fields.load_state_dict(state)
    return fields, meta
