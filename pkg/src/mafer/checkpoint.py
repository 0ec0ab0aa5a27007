"""MAFK checkpoint files.

Layout: ``b"MAFK"`` | u32 version | u32 header length | UTF-8 JSON header |
raw little-endian f32 payloads in header order. The header lists tensors as
``{name, shape, dtype, byte_offset}`` (offset relative to the payload start)
and carries a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAFK"
VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(payload)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise NotACheckpointError("not a checkpoint: bad magic bytes")
    if len(blob) < 12:
        raise TruncatedCheckpointError("checkpoint truncated inside the preamble")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < 12 + hlen:
        raise TruncatedCheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NotACheckpointError(f"not a checkpoint: unreadable header ({exc})") from None
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] != "f32":
            raise CheckpointError(f"tensor {e['name']!r} has unsupported dtype {e['dtype']!r}")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + int(e["byte_offset"])
        end = start + 4 * n
        if end > len(blob):
            raise TruncatedCheckpointError(f"checkpoint truncated inside tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float32).reshape(e["shape"])
    return tensors, header.get("meta", {})


def save_checkpoint(model, path, optimizer=None, meta: dict | None = None) -> Path:
    """Write model parameters (and Adam moments when given) to ``path``."""
    tensors = model.state_dict()
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
        meta["adam_t"] = optimizer.t
    path = Path(path)
    path.write_bytes(encode(tensors, meta))
    return path


def load_checkpoint(path, config=None):
    """Rebuild a model from ``path``.

    With ``config`` the checkpoint is loaded into a model of that
    configuration, which raises :class:`ShapeMismatchError` if they disagree.
    Returns ``(model, meta, optimizer_arrays)``.
    """
    from .nn import CnnModel, ModelConfig

    tensors, meta = decode(Path(path).read_bytes())
    if config is None:
        config = ModelConfig.from_dict(meta["model"])
    model = CnnModel.create(config)
    state = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    opt = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    model.load_state_dict(state)
    return model, meta, opt
