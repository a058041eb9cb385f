#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Checkpoints
Binary tensor archive:

    "GTCK" | u32 version=1 | u32 count
    per tensor: u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 payload
    u32 CRC32 of every preceding byte

All integers and floats little-endian. Values are stored as 32-bit floats.
"""
import logging
import os
import struct
import tempfile
import zlib
from typing import Dict, Mapping

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"GTCK"
VERSION = 1


def _arrays_of(params) -> Mapping[str, np.ndarray]:
    if hasattr(params, "arrays"):
        return params.arrays()
    return {name: (t.data if hasattr(t, "data") and not isinstance(t, np.ndarray) else t)
            for name, t in params.items()}


def encode(params) -> bytes:
    arrays = _arrays_of(params)
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    """Tensor name -> float64 array; raises CheckpointError on any corruption"""
    if len(blob) < 16:
        raise CheckpointError(f"{source}: too short to be a checkpoint ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}")
    body, trailer = blob[:-4], blob[-4:]
    stored = struct.unpack("<I", trailer)[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"{source}: CRC mismatch (stored {stored:08x}, computed {actual:08x})")

    reader = _Reader(body, source)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    count = reader.u32()
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name is not UTF-8 ({e})")
        rank = reader.u32()
        dims = tuple(reader.u32() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * n)
        if name in arrays:
            raise CheckpointError(f"{source}: duplicate tensor '{name}'")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if reader.pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - reader.pos} unexpected trailing bytes")
    return arrays


def save(path: str, params) -> str:
    """Write atomically: a temp file in the same directory is renamed over path"""
    blob = encode(params)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"checkpoint written: {path} ({len(blob)} bytes)")
    return path


def load(path: str) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})")
    return decode(blob, source=path)
