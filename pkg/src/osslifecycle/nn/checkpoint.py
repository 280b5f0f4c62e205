"""Versioned checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"OSLCKPT\\0"
    uint32    format version (1)
    uint32    header length H
    H bytes   UTF-8 JSON header (sorted keys): model config, tensor table,
              temperature and training metadata
    ...       tensor blobs, float32 little-endian, in tensor-table order
              (parameters in definition order, then normalization buffers)

Saving is byte-stable: the same model and metadata always produce the same file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .models import HeavyModel, MLP, build_model, model_config_from_json, model_config_to_json

MAGIC = b"OSLCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(model: MLP | HeavyModel) -> list[tuple[str, str, np.ndarray]]:
    return ([(n, "param", v) for n, v in model.named_parameters()]
            + [(n, "buffer", v) for n, v in model.named_buffers()])


def checkpoint_bytes(model: MLP | HeavyModel, metadata: Mapping[str, Any] | None = None) -> bytes:
    table, blobs, offset = [], [], 0
    for name, kind, value in _tensors(model):
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        table.append({"name": name, "kind": kind, "shape": list(value.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "model": model_config_to_json(model.cfg),
        "tensors": table,
        "temperature": float(model.temperature),
        "metadata": dict(metadata or {}),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw + b"".join(blobs)


def save_checkpoint(model: MLP | HeavyModel, path: str | Path, metadata: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def load_checkpoint_bytes(data: bytes) -> tuple[MLP | HeavyModel, dict[str, Any]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    body = memoryview(data)[16 + hlen:]
    model = build_model(model_config_from_json(header["model"]), seed=0, dtype=np.float32)
    slots = {n: v for n, _, v in _tensors(model)}
    if set(slots) != {t["name"] for t in header["tensors"]}:
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    for t in header["tensors"]:
        target = slots[t["name"]]
        if list(target.shape) != t["shape"]:
            raise CheckpointError(f"shape mismatch for {t['name']}: {target.shape} vs {t['shape']}")
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        target[...] = np.frombuffer(body, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
    model.temperature = float(header.get("temperature", 1.0))
    return model, header.get("metadata", {})


def load_checkpoint(path: str | Path) -> tuple[MLP | HeavyModel, dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing checkpoint: {path}") from None
    return load_checkpoint_bytes(data)
