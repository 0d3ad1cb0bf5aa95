"""Binary parameter container.

Layout: 8-byte magic, little-endian uint32 format version, uint64 header
length, UTF-8 JSON header (sorted keys), then every tensor's elements as
little-endian float64 in header order. The header lists each group's name,
shape and element offset, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SQBTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    groups = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float64).numpy()
        groups.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    header = json.dumps(
        {"version": VERSION, "meta": meta or {}, "groups": groups}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a seqboat checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen])
    data = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    tensors = {}
    for g in header["groups"]:
        count = int(np.prod(g["shape"], dtype=np.int64))
        chunk = data[g["offset"] : g["offset"] + count]
        if chunk.size != count:
            raise CheckpointError(f"truncated data for {g['name']}")
        tensors[g["name"]] = torch.from_numpy(chunk.astype(np.float64).reshape(g["shape"]))
    return tensors, header["meta"]


def save_model(path, model, extra: dict[str, torch.Tensor] | None = None, meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    meta = dict(meta or {})
    meta["config"] = model.cfg.to_dict()
    save_tensors(path, tensors, meta)


def load_model(path, expect_config=None):
    """Rebuild a model from a checkpoint; returns (model, extra tensors, meta)."""
    from .model import ModelConfig, SeqBoatModel

    tensors, meta = load_tensors(path)
    cfg = ModelConfig(**meta["config"])
    if expect_config is not None:
        mine, theirs = cfg.to_dict(), expect_config.to_dict()
        diff = sorted(k for k in mine if k != "seed" and mine[k] != theirs.get(k))
        if diff:
            raise CheckpointError(f"checkpoint/config mismatch in: {', '.join(diff)}")
    model = SeqBoatModel(cfg)
    state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, extra, meta
