"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DAAE" | u32 version | u32 manifest length | manifest JSON (UTF-8)
    then per tensor: u32 name length | name | u32 rank | u32 dims... | float64 data

The manifest is written with sorted keys and no whitespace, so a file that is
loaded and saved again is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"DAAE"
VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a checkpoint this version can read."""


@dataclass
class Checkpoint:
    manifest: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.manifest.get("epoch", 0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.manifest == other.manifest
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    """Short SHA-256 of the canonical JSON of a resolved configuration."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def encode(ck: Checkpoint) -> bytes:
    head = canonical_json(ck.manifest).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> Checkpoint:
    """Parse a checkpoint, raising :class:`CheckpointFormatError` on any malformation."""
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    try:
        pos = 4
        version, n = struct.unpack_from("<II", data, pos)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
        pos += 8
        manifest = json.loads(data[pos : pos + n].decode("utf-8"))
        pos += n
        tensors: Dict[str, np.ndarray] = {}
        while pos < len(data):
            (klen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointFormatError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except CheckpointFormatError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"corrupted checkpoint: {exc}") from exc
    return Checkpoint(manifest, tensors)


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# model and optimizer state

def capture(model, optim=None, manifest: Optional[dict] = None, epoch: int = 0) -> Checkpoint:
    """Snapshot parameters and (optionally) Adam moments into a checkpoint."""
    manifest = dict(manifest or {})
    manifest["epoch"] = epoch
    tensors = {f"param.{k}": p.data.copy() for k, p in model.params.items()}
    if optim is not None:
        steps = {}
        for gname, adam in (("ae", optim.ae), ("disc", optim.disc)):
            st = adam.state
            steps[gname] = st.t
            for k in adam.params:
                if k in st.m:
                    tensors[f"adam.{gname}.m.{k}"] = st.m[k].copy()
                    tensors[f"adam.{gname}.v.{k}"] = st.v[k].copy()
        manifest["adam_steps"] = steps
    return Checkpoint(manifest, tensors)


def restore(ck: Checkpoint, model, optim=None) -> None:
    params = model.params
    for k, p in params.items():
        key = f"param.{k}"
        if key not in ck.tensors:
            raise CheckpointFormatError(f"checkpoint lacks parameter {k!r}")
        if ck.tensors[key].shape != p.shape:
            raise CheckpointFormatError(f"parameter {k!r} has shape {ck.tensors[key].shape}, model expects {p.shape}")
    for k, p in params.items():
        p.data = ck.tensors[f"param.{k}"].copy()
    if optim is not None:
        steps = ck.manifest.get("adam_steps", {})
        for gname, adam in (("ae", optim.ae), ("disc", optim.disc)):
            adam.state.t = int(steps.get(gname, 0))
            adam.state.m.clear()
            adam.state.v.clear()
            for k in adam.params:
                if f"adam.{gname}.m.{k}" in ck.tensors:
                    adam.state.m[k] = ck.tensors[f"adam.{gname}.m.{k}"].copy()
                    adam.state.v[k] = ck.tensors[f"adam.{gname}.v.{k}"].copy()
