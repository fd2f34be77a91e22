"""FMDL checkpoint files: named f32 tensors, little-endian."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError

MAGIC = b"FMDL"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def save_checkpoint(model: torch.nn.Module, path, extra: dict | None = None) -> Path:
    """Writes every parameter and buffer. ``extra`` (JSON) goes to a sidecar file if given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    chunks = [_HEAD.pack(MAGIC, VERSION, len(state))]
    for name, t in state.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    if extra is not None:
        path.with_suffix(".json").write_text(json.dumps(extra, indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        magic, version, count = _HEAD.unpack_from(raw)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"not an FMDL v{VERSION} file")
    off = _HEAD.size
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(raw):
                raise CheckpointError(f"truncated data for {name}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    if off != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def load_checkpoint(model: torch.nn.Module, path) -> torch.nn.Module:
    """Loads into an already constructed model, verifying names and shapes."""
    tensors = read_checkpoint(path)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"name mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in state.items():
        if tuple(t.shape) != tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tensors[name].shape}")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})
    return model


def checkpoint_extra(path) -> dict | None:
    side = Path(path).with_suffix(".json")
    return json.loads(side.read_text()) if side.exists() else None
