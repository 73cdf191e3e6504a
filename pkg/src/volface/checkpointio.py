"""Versioned binary checkpoint format.

Layout (all integers little-endian):

    magic "NOFA" | version u32 | meta JSON (u32 length + utf8)
    | tensor count u32 | tensor records | crc32 u32

Each tensor record is: name (u32 length + utf8), dtype code u8 (0 = float32),
rank u32, dims u32 * rank, then the raw little-endian float32 payload. The
meta JSON carries stage id, step counter, RNG seed, Adam scalar state and the
model configuration. Records are written in sorted name order, so
save -> load -> save is byte-identical, and the trailing CRC32 covers
everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffcore import AdamState, ParameterGroup

MAGIC = b"NOFA"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointMeta:
    stage: str
    step: int
    seed: int
    adam_t: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    model_config: dict


def _collect_tensors(groups: dict[str, ParameterGroup],
                     state: AdamState | None) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for g in groups.values():
        for leaf, p in g.items():
            tensors[f"param/{g.name}/{leaf}"] = p
    if state is not None:
        for key, m in state.m.items():
            tensors[f"adam.m/{key}"] = m
        for key, v in state.v.items():
            tensors[f"adam.v/{key}"] = v
    return tensors


def save_checkpoint(path: str | Path, groups: dict[str, ParameterGroup],
                    state: AdamState | None, meta: CheckpointMeta) -> None:
    tensors = _collect_tensors(groups, state)
    meta_json = json.dumps({
        "stage": meta.stage, "step": meta.step, "seed": meta.seed,
        "adam_t": meta.adam_t, "lr": meta.lr, "beta1": meta.beta1,
        "beta2": meta.beta2, "eps": meta.eps, "model_config": meta.model_config,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(meta_json)) + meta_json
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype != torch.float32:
            raise CheckpointError(f"checkpoint tensors must be float32, {name} is {t.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<B", DTYPE_F32)
        dims = tuple(t.shape)
        buf += struct.pack("<I", len(dims))
        buf += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
        buf += t.numpy().astype("<f4", copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_checkpoint(path: str | Path) -> tuple[CheckpointMeta, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupted file)")
    r = _Reader(data[:-4])
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_raw = json.loads(r.take(r.u32()).decode("utf-8"))
    meta = CheckpointMeta(
        stage=meta_raw["stage"], step=meta_raw["step"], seed=meta_raw["seed"],
        adam_t=meta_raw["adam_t"], lr=meta_raw["lr"], beta1=meta_raw["beta1"],
        beta2=meta_raw["beta2"], eps=meta_raw["eps"],
        model_config=meta_raw["model_config"])
    count = r.u32()
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        dtype = r.u8()
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype} for {name}")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
        tensors[name] = torch.from_numpy(payload)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after tensor records")
    return meta, tensors


def restore(groups: dict[str, ParameterGroup], state: AdamState | None,
            meta: CheckpointMeta, tensors: dict[str, torch.Tensor]) -> None:
    """Copy stored tensors into existing groups (and optimizer state)."""
    with torch.no_grad():
        for g in groups.values():
            for leaf, p in g.items():
                key = f"param/{g.name}/{leaf}"
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor {key}")
                if tuple(tensors[key].shape) != tuple(p.shape):
                    raise CheckpointError(f"shape mismatch for {key}")
                p.copy_(tensors[key])
        if state is not None:
            state.t = meta.adam_t
            state.lr, state.beta1, state.beta2, state.eps = \
                meta.lr, meta.beta1, meta.beta2, meta.eps
            for key in state.m:
                state.m[key].copy_(tensors[f"adam.m/{key}"])
                state.v[key].copy_(tensors[f"adam.v/{key}"])
