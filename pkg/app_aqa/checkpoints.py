"""
ANPW checkpoint files.

Layout (little-endian): b"ANPW", u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u32 rows, u32 cols and rows*cols
float64 values in row-major order. Nothing may follow the last tensor.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

import numpy as np

from .action_net import ModelParams
from .errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ANPW"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sII")
_NAME_LENGTH = struct.Struct("<H")
_SHAPE = struct.Struct("<II")


def encode_params(params: ModelParams) -> bytes:
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...", code="bad_name")
        rows, cols = value.shape
        chunks.append(_NAME_LENGTH.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(_SHAPE.pack(rows, cols))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Cursor:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(
                f"{self.source}: truncated while reading {what} at byte {self.offset}",
                code="truncated",
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk


def decode_params(payload: bytes, source: str = "<bytes>") -> ModelParams:
    cursor = _Cursor(payload, source)
    magic, version, count = _HEADER.unpack(cursor.take(_HEADER.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}", code="bad_magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}", code="unsupported_version")

    params = ModelParams()
    for _ in range(count):
        (name_length,) = _NAME_LENGTH.unpack(cursor.take(_NAME_LENGTH.size, "name length"))
        try:
            name = cursor.take(name_length, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: tensor name is not UTF-8", code="bad_name") from None
        rows, cols = _SHAPE.unpack(cursor.take(_SHAPE.size, f"shape of '{name}'"))
        raw = cursor.take(rows * cols * 8, f"values of '{name}'")
        if name in params:
            raise CheckpointError(f"{source}: duplicate tensor '{name}'", code="duplicate_tensor")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    if cursor.offset != len(payload):
        raise CheckpointError(
            f"{source}: {len(payload) - cursor.offset} unexpected trailing bytes",
            code="trailing_bytes",
        )
    return params


def check_shapes(params: ModelParams, expected: Mapping[str, Tuple[int, int]], source: str = "checkpoint") -> None:
    found = dict(params.shapes())
    expected = dict(expected)
    if found == expected:
        return
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    wrong = sorted(name for name in set(found) & set(expected) if found[name] != expected[name])
    details = []
    if missing:
        details.append(f"missing {', '.join(missing[:3])}")
    if extra:
        details.append(f"unexpected {', '.join(extra[:3])}")
    for name in wrong[:3]:
        details.append(f"{name} is {found[name]} not {expected[name]}")
    raise CheckpointError(f"{source}: shape mismatch ({'; '.join(details)})", code="shape_mismatch")


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params))
    logger.info("Saved %s tensors to %s", len(params), path)
    return path


def load_params(
    path: Union[str, Path],
    expected: Optional[Mapping[str, Tuple[int, int]]] = None,
) -> ModelParams:
    """Read a checkpoint; when `expected` shapes are given, reject any mismatch."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}", code="not_found") from None
    except OSError as exc:
        raise CheckpointError(f"checkpoint is unreadable: {path} ({exc.strerror})", code="unreadable") from None
    params = decode_params(payload, source=str(path))
    if expected is not None:
        check_shapes(params, expected, source=str(path))
    return params
