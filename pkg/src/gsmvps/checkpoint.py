"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes   b"GS2DCKPT"
    version    u32
    header_len u32
    header     JSON, UTF-8, ``header_len`` bytes
    blocks     raw array bytes, concatenated in header order

The header lists every block as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` with offsets relative to the start of the block area. The splat
block is ``splats`` with the row layout of :data:`gsmvps.scene.RAW_FIELDS`;
light-network weights live under ``mlp/<parameter name>`` and optimizer
moments, when saved, under ``optim/...``. Files are written atomically.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .scene import RAW_FIELDS, ROW_WIDTH, GaussianScene

MAGIC = b"GS2DCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    scene: GaussianScene
    stage: int
    iteration: int = 0
    config: dict = field(default_factory=dict)
    mlp: dict[str, torch.Tensor] | None = None
    extra: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def has_pbr(self) -> bool:
        return self.stage >= 2 and self.mlp is not None


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def encode(ckpt: Checkpoint) -> bytes:
    blocks: list[tuple[str, np.ndarray]] = [("splats", _to_numpy(ckpt.scene.to_rows()))]
    for name, t in (ckpt.mlp or {}).items():
        blocks.append((f"mlp/{name}", _to_numpy(t)))
    for name, t in ckpt.extra.items():
        blocks.append((name, _to_numpy(t)))
    entries, offset = [], 0
    for name, arr in blocks:
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "num_splats": len(ckpt.scene),
        "row_width": ROW_WIDTH,
        "fields": [list(f) for f in RAW_FIELDS],
        "has_mlp": ckpt.mlp is not None,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "blocks": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(a.tobytes() for _, a in blocks)


def decode(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("row_width") != ROW_WIDTH or [tuple(f) for f in header.get("fields", [])] != list(RAW_FIELDS):
        raise CheckpointError("checkpoint row layout does not match this version")
    base = _PREFIX.size + hlen
    arrays = {}
    for e in header["blocks"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"block {e['name']!r} is truncated")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if "splats" not in arrays:
        raise CheckpointError("checkpoint has no splat block")
    scene = GaussianScene.from_rows(arrays.pop("splats"))
    mlp = {k[4:]: v for k, v in arrays.items() if k.startswith("mlp/")} if header["has_mlp"] else None
    extra = {k: v for k, v in arrays.items() if not k.startswith("mlp/")}
    return Checkpoint(scene, header["stage"], header["iteration"], header["config"], mlp, extra, header["meta"])


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())
