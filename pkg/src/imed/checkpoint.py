"""Flat named-tensor archives.

Layout of one file::

    b"IMEDCKPT"  | u64 LE manifest length | manifest JSON (utf-8) | blob

The manifest lists every tensor as ``{"name", "shape", "offset", "nbytes"}``
into the blob, which holds little-endian float32 values back to back. Free
form metadata sits under ``"meta"``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from imed.errors import ConfigError

MAGIC = b"IMEDCKPT"
FORMAT_VERSION = 1


def save_archive(path: Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "dtype": "<f4", "tensors": entries, "meta": meta}, sort_keys=True
    ).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_archive(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path} is not an IMED checkpoint archive")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + n])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported archive version {manifest.get('format_version')}")
    blob = memoryview(data)[16 + n :]
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, manifest["meta"]


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str):
    state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    expected = module.state_dict()
    if set(state) != set(expected):
        raise ConfigError(
            f"checkpoint entries for {prefix!r} do not match the model: "
            f"missing {sorted(set(expected) - set(state))}, unexpected {sorted(set(state) - set(expected))}"
        )
    for k, v in state.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ConfigError(f"{prefix}.{k}: checkpoint shape {tuple(v.shape)} != model {tuple(expected[k].shape)}")
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})
