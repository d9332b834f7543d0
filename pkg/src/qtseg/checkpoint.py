"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"QTSG"  u32 version  u32 config_len  config_json(utf-8)  u32 entry_count
    entry := u16 name_len  name(utf-8)  u8 rank  u32 dims[rank]  u32 crc32  f32 payload[prod(dims)]
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"QTSG"
VERSION = 1


class CheckpointError(IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CorruptEntryError(CheckpointError):
    pass


class UnknownEntryError(CheckpointError):
    pass


def encode(state: dict[str, np.ndarray], config: ModelConfig | dict) -> bytes:
    cfg = config.to_dict() if isinstance(config, ModelConfig) else dict(config)
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(state))]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a QTSG checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    try:
        cfg = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptEntryError(f"config block unreadable: {e}") from e
    (count,) = r.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name in state:
            raise CorruptEntryError(f"duplicate entry {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (crc,) = r.unpack("<I")
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        if zlib.crc32(payload) != crc:
            raise CorruptEntryError(f"entry {name!r} failed checksum")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptEntryError(f"{len(buf) - r.pos} trailing bytes after last entry")
    return state, cfg


def save_checkpoint(model, path, config: ModelConfig | None = None) -> None:
    config = config or model.config
    Path(path).write_bytes(encode(model.state_dict(), config))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    state, cfg = decode(buf)
    return state, ModelConfig.from_dict(cfg)


def load_model(path):
    from .model import QTSeg

    state, config = load_checkpoint(path)
    model = QTSeg(config)
    try:
        model.load_state_dict(state)
    except KeyError as e:
        raise UnknownEntryError(str(e)) from e
    except ValueError as e:
        raise CorruptEntryError(str(e)) from e
    model.eval()
    return model
