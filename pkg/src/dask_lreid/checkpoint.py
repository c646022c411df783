"""Binary checkpoints for ReID models and rehearsers.

Layout::

    b"DASKCKPT1" | u64 LE metadata length | metadata (UTF-8 JSON) | payload

The payload is every parameter, in declaration order, as little-endian
float64. There is no checksum: a flipped payload byte still loads.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .rehearser import AKPNet, SharedConvRehearser, StatsRehearser
from .reid import ReIDModel

MAGIC = b"DASKCKPT1"
FORMAT_VERSION = 1
KINDS = ("reid", "akpnet", "stats_pred", "shared_conv")
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Base class for unreadable or mismatched checkpoints."""


class MagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class KindError(CheckpointError):
    pass


def model_kind(model: nn.Module) -> str:
    kind = getattr(model, "kind", None)
    if kind not in KINDS:
        raise TypeError(f"cannot checkpoint a {type(model).__name__}")
    return kind


def build_model(kind: str, arch: dict) -> nn.Module:
    if kind == "reid":
        return ReIDModel(int(arch["n_ids"]), int(arch["dim"]))
    if kind == "akpnet":
        return AKPNet(int(arch["k"]), int(arch["n_kernels"]))
    if kind == "stats_pred":
        return StatsRehearser()
    if kind == "shared_conv":
        return SharedConvRehearser(int(arch["k"]))
    raise KindError(f"unknown checkpoint kind {kind!r}")


def _metadata(model: nn.Module, config_hash: str) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": model_kind(model),
        "arch": model.arch(),
        "config_hash": config_hash,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()],
    }


def to_bytes(model: nn.Module, config_hash: str = "") -> bytes:
    meta = json.dumps(_metadata(model, config_hash), sort_keys=True).encode("utf-8")
    payload = b"".join(p.detach().numpy().astype("<f8").tobytes() for p in model.parameters())
    return MAGIC + _LEN.pack(len(meta)) + meta + payload


def save_checkpoint(model: nn.Module, path, config_hash: str = "") -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    data = to_bytes(model, config_hash)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_metadata(data: bytes) -> tuple[dict, int]:
    """Parse the header; returns (metadata, payload offset)."""
    if data[:len(MAGIC)] != MAGIC:
        raise MagicError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    start = len(MAGIC) + _LEN.size
    if len(data) < start:
        raise TruncatedError("file ends inside the header")
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    if len(data) < start + n:
        raise TruncatedError("file ends inside the metadata block")
    try:
        meta = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {meta.get('format_version')!r}")
    return meta, start + n


def from_bytes(data: bytes, expected_kind: str | None = None) -> tuple[nn.Module, dict]:
    meta, offset = read_metadata(data)
    kind = meta.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise KindError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    model = build_model(kind, meta.get("arch", {}))
    params = list(model.named_parameters())
    declared = [(e["name"], tuple(e["shape"])) for e in meta["params"]]
    actual = [(n, tuple(p.shape)) for n, p in params]
    if declared != actual:
        raise ShapeError(f"declared parameter shapes do not match a {kind} model with arch {meta.get('arch')}")
    need = sum(int(np.prod(s)) for _, s in declared) * 8
    have = len(data) - offset
    if have < need:
        raise TruncatedError(f"payload has {have} bytes, shapes need {need}")
    if have > need:
        raise ShapeError(f"payload has {have} bytes, shapes need only {need}")
    with torch.no_grad():
        pos = offset
        for _, p in params:
            n = p.numel()
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(arr.astype(np.float64)))
            pos += n * 8
    model.eval()
    return model, meta


def load_checkpoint(path, expected_kind: str | None = None) -> tuple[nn.Module, dict]:
    """Returns ``(model, metadata)``."""
    return from_bytes(Path(path).read_bytes(), expected_kind)


__all__ = ["MAGIC", "KINDS", "CheckpointError", "MagicError", "TruncatedError", "ShapeError", "KindError",
           "save_checkpoint", "load_checkpoint", "to_bytes", "from_bytes", "read_metadata", "build_model"]
