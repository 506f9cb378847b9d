"""Binary checkpoint format.

Layout (little-endian)::

    b"TFTC" | u32 version | u32 n | n bytes UTF-8 JSON metadata
    u32 tensor count
    per tensor: u32 name length | name | u32 rank | rank x u32 dims | float64 data

The JSON carries the model config, seed and any extra entries (schema,
normalizer statistics) supplied by the caller.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .model import TFTConfig, TFTModel

MAGIC = b"TFTC"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def save_checkpoint(model: TFTModel, path: str | Path, extra: dict | None = None) -> None:
    meta = {"config": model.config.to_dict(), "seed": model.seed, **(extra or {})}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(blob)), blob]
    state = model.state_dict()
    parts.append(_u32(len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(s) for s in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (metadata, state dict) without building a model."""
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt metadata: {exc}") from exc
    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise DataError(f"{path}: trailing bytes after tensors")
    return meta, state


def load_checkpoint(path: str | Path) -> tuple[TFTModel, dict]:
    meta, state = read_checkpoint(path)
    try:
        config = TFTConfig.from_dict(meta["config"])
    except KeyError as exc:
        raise DataError(f"{path}: metadata lacks {exc}") from exc
    except ConfigError as exc:
        raise DataError(f"{path}: invalid stored config: {exc}") from exc
    model = TFTModel(config, seed=int(meta.get("seed", 0)))
    try:
        model.load_state_dict(state)
    except (ConfigError, DimensionError) as exc:
        raise DataError(f"{path}: tensors do not match the stored config: {exc}") from exc
    return model, meta
