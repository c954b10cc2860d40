"""SLTC checkpoint container.

Layout (little endian)::

    "SLTC" | u32 version | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f64 data
    u64 trailer length | JSON trailer (configs, vocabularies, stages)
    u32 CRC32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, UnsupportedVersionError
from .model import PipelineModel

MAGIC = b"SLTC"
VERSION = 1


def _encode(model: PipelineModel) -> bytes:
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, t in state.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    trailer = json.dumps(model.metadata(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(trailer)))
    parts.append(trailer)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: PipelineModel, path) -> None:
    Path(path).write_bytes(_encode(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> PipelineModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not an SLTC checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(8)
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    (tlen,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(tlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable trailer ({e})") from None
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - r.pos} unexpected trailing bytes")
    model = PipelineModel.from_metadata(meta)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CorruptCheckpointError(f"{path}: tensors do not match the stored configs: {e}") from None
    return model
