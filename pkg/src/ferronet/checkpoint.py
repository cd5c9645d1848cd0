"""Checkpoint files: a JSON header line followed by named float64 records.

Layout::

    FERRONET-CHECKPOINT\\n
    <one line of JSON: format_version, model config, epoch, metrics digest,
     free-form meta, tensor count>\\n
    repeated tensor_count times:
        uint32 name length | name (utf-8) | uint32 ndim | uint32 dims[ndim] |
        float64 data (little endian, row-major)

All integers are little endian. The reader insists on exactly ``tensor_count``
records and no trailing bytes, so truncation is always detected.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, ContractError
from .models import ModelConfig, ResNet18, build_model

MAGIC = b"FERRONET-CHECKPOINT\n"
FORMAT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ResNet18, meta: Optional[dict], path) -> Path:
    """Serialise parameters and batch-norm buffers of ``model`` to ``path``."""
    meta = dict(meta or {})
    state = model.state_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(model.config),
        "seed": model.seed,
        "epoch": meta.pop("epoch", None),
        "metrics_digest": meta.pop("metrics_digest", None),
        "meta": meta,
        "tensor_count": len(state),
    }
    chunks = [MAGIC, json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    for name, arr in state.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    return Path(path)


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, {name: array}) after validating framing and version."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = buf.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(buf[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    reader = _Reader(buf, end + 1)
    tensors = {}
    for _ in range(int(header["tensor_count"])):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - reader.pos} unexpected trailing bytes")
    return header, tensors


def load_checkpoint(path, model: Optional[ResNet18] = None) -> tuple[ResNet18, dict]:
    """Load weights into ``model`` (or a model rebuilt from the header).

    Returns ``(model, header)``. Tensor names the model does not have, and
    tensors the model has but the file lacks, are both load errors.
    """
    header, tensors = read_checkpoint(path)
    if model is None:
        try:
            cfg = header["model_config"]
            cfg["multiscale_scales"] = tuple(cfg["multiscale_scales"])
            model = build_model(ModelConfig(**cfg), seed=header.get("seed", 0))
        except (KeyError, TypeError, ContractError) as exc:
            raise CheckpointError(f"{path}: cannot rebuild model from header ({exc})") from exc
    try:
        model.load_state_dict(tensors)
    except ContractError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, header
