"""Versioned checkpoint files.

Layout: ``PCKP`` magic, ``<I`` format version, ``<Q`` header length, a JSON
header (sorted keys, compact separators), then the raw little-endian arrays
in header order. No timestamps or pickles, so load-then-save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PCKP"
VERSION = 1
STAGES = ("stage1", "stage2")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    config: dict
    stage: str
    frozen: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    @classmethod
    def from_model(cls, model: torch.nn.Module, config: dict, stage: str, frozen=(), meta=None) -> "Checkpoint":
        weights = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(weights, config, stage, sorted(frozen), dict(meta or {}))

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.weights.items()}

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.weights):
            arr = np.ascontiguousarray(self.weights[name])
            dt = arr.dtype.newbyteorder("<")
            data = arr.astype(dt, copy=False).tobytes()
            entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {
            "config": self.config,
            "stage": self.stage,
            "frozen": list(self.frozen),
            "meta": self.meta,
            "tensors": entries,
        }
        text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(text)) + text + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file")
        if len(data) < 16:
            raise CheckpointError("checkpoint truncated in header")
        version, n = struct.unpack("<IQ", data[4:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(data[16 : 16 + n])
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        base = 16 + n
        weights = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            chunk = data[start : start + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise CheckpointError(f"tensor {e['name']} truncated")
            weights[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        end = base + sum(e["nbytes"] for e in header["tensors"])
        if end != len(data):
            raise CheckpointError("unexpected trailing bytes")
        return cls(weights, header["config"], header["stage"], header["frozen"], header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
