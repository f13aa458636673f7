"""Checkpoint format: a versioned JSON manifest plus a flat float32 tensor blob.

The manifest records the model config, epoch counter, tensor directory
(name, shape, offset into the blob), optimizer state skeleton, and arbitrary
JSON extras. Tensors are stored little-endian float32 in manifest order, so a
float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _blob_path(manifest_path: str) -> str:
    return str(manifest_path) + ".bin"


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0
        self.entries: list[dict] = []

    def add(self, name: str, tensor: torch.Tensor) -> None:
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        raw = arr.tobytes()
        self.entries.append(
            {"name": name, "shape": list(tensor.shape), "offset": self.offset}
        )
        self.chunks.append(raw)
        self.offset += len(raw)


class _BlobReader:
    def __init__(self, data: bytes, entries: list[dict]):
        self.data = data
        self.by_name = {e["name"]: e for e in entries}

    def get(self, name: str) -> torch.Tensor:
        if name not in self.by_name:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint blob")
        e = self.by_name[name]
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=e["offset"])
        return torch.from_numpy(arr.copy()).reshape(shape)


def _pack_optimizer(optimizer: torch.optim.Optimizer, blob: _BlobWriter) -> dict:
    sd = optimizer.state_dict()
    state_meta: dict[str, dict] = {}
    for idx, entry in sd["state"].items():
        meta = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                blob.add(f"opt.{idx}.{key}", value)
                meta[key] = {"tensor": f"opt.{idx}.{key}"}
            else:
                meta[key] = {"value": value}
        state_meta[str(idx)] = meta
    return {"state": state_meta, "param_groups": sd["param_groups"]}


def _unpack_optimizer(meta: dict, blob: _BlobReader) -> dict:
    state = {}
    for idx, entry in meta["state"].items():
        rebuilt = {}
        for key, spec in entry.items():
            if "tensor" in spec:
                rebuilt[key] = blob.get(spec["tensor"])
            else:
                rebuilt[key] = spec["value"]
        state[int(idx)] = rebuilt
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(
    path,
    model,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    extra: dict | None = None,
) -> None:
    """Write manifest JSON at `path` and the tensor blob at `path + ".bin"`."""
    blob = _BlobWriter()
    for name, param in model.trainable_named_parameters():
        blob.add(name, param)
    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": epoch,
        "model_config": model.config.to_dict(),
        "blob": os.path.basename(_blob_path(path)),
        "tensors": None,  # filled below, after optimizer tensors land in the blob
        "optimizer": _pack_optimizer(optimizer, blob) if optimizer is not None else None,
        "extra": extra or {},
    }
    manifest["tensors"] = blob.entries
    with open(_blob_path(path), "wb") as f:
        f.write(b"".join(blob.chunks))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _check_config(saved: dict, current: dict, prefix: str = "model_config") -> None:
    for key in sorted(set(saved) | set(current)):
        path = f"{prefix}.{key}"
        if key not in saved or key not in current:
            raise CheckpointError(f"config field {path} present on only one side")
        a, b = saved[key], current[key]
        if isinstance(a, dict) and isinstance(b, dict):
            _check_config(a, b, path)
        elif a != b:
            raise CheckpointError(
                f"checkpoint/config mismatch at {path}: saved {a!r}, current {b!r}"
            )


def load_checkpoint(path, model, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore trainable parameters (and optimizer state when given).

    Returns the manifest. The stored model config must match the live model's
    config exactly; the first differing field is named in the error.
    """
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
        )
    _check_config(manifest["model_config"], model.config.to_dict())
    blob_file = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"])
    try:
        with open(blob_file, "rb") as f:
            blob = _BlobReader(f.read(), manifest["tensors"])
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint blob {blob_file}: {e}") from e
    named = dict(model.trainable_named_parameters())
    for name, param in named.items():
        stored = blob.get(name)
        if tuple(stored.shape) != tuple(param.shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(stored.shape)} != model {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(stored.to(param.dtype))
    if optimizer is not None and manifest.get("optimizer") is not None:
        optimizer.load_state_dict(_unpack_optimizer(manifest["optimizer"], blob))
    return manifest
