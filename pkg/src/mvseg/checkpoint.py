"""Versioned binary checkpoint container.

Layout::

    b"MVSEGCKP"            8-byte magic
    uint32 little-endian   format version
    uint64 little-endian   header length in bytes
    header                 UTF-8 JSON: configs, metadata, tensor index
    payload                raw little-endian tensor bytes, concatenated

Tensor names are namespaced ("field.trunk.0.weight", "fusion.encoder...",
"optim.3.exp_avg") so one file can hold several modules.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVSEGCKP"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    configs: dict[str, dict]
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def namespace(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"configs": ckpt.configs, "meta": ckpt.meta, "tensors": index}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_configs: dict[str, dict] | None = None) -> Checkpoint:
    """Read a checkpoint; `expect_configs` entries must match the stored ones."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    ckpt = Checkpoint(configs=header["configs"], tensors=tensors, meta=header["meta"])
    for key, cfg in (expect_configs or {}).items():
        stored = ckpt.configs.get(key)
        if stored != cfg:
            raise CheckpointError(f"{path}: {key} config mismatch: stored {stored}, expected {cfg}")
    return ckpt
