"""Versioned binary checkpoint files.

Layout: magic "EDLM", u32 version, u32 config-text length + UTF-8 config
(key=value lines, provenance included), u32 tensor count, then per tensor:
u32 name length + UTF-8 name, u8 rank, u32 per dimension, raw little-endian
float32 payload. All integers little-endian. Save goes through a temp file
and rename, so a failed write never leaves a partial checkpoint behind.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError
from .io_utils import atomic_write_bytes
from .model import EncoderParams, ModelConfig, parameter_shapes
from .tensor import Tensor

MAGIC = b"EDLM"
VERSION = 1


@dataclass
class Checkpoint:
    params: EncoderParams
    config: ModelConfig
    provenance: str


def _config_text(config: ModelConfig, provenance: str) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    lines.append(f"provenance={provenance}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[ModelConfig, str]:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    if "provenance" not in kv:
        raise FormatError("config text lacks a provenance entry")
    provenance = kv.pop("provenance")
    expected = {f.name: f.type for f in fields(ModelConfig)}
    if set(kv) != set(expected):
        raise FormatError(f"config keys {sorted(kv)} do not match the known fields")
    converted: dict[str, object] = {}
    for f in fields(ModelConfig):
        raw = kv[f.name]
        if f.type == "int":
            converted[f.name] = int(raw)
        elif f.type == "float":
            converted[f.name] = float(raw)
        elif f.type == "bool":
            if raw not in ("true", "false"):
                raise FormatError(f"boolean field {f.name} has value {raw!r}")
            converted[f.name] = raw == "true"
        else:
            converted[f.name] = raw
    return ModelConfig(**converted), provenance


def save_checkpoint(params: EncoderParams, config: ModelConfig, provenance: str, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_bytes = _config_text(config, provenance).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    names = list(parameter_shapes(config))
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = params[name].data.astype(np.float32, copy=False)
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.payload):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.payload[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u8(self, what: str) -> int:
        return self.read(1, what)[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = Path(path).read_bytes()
    r = _Reader(payload)
    magic = r.read(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    cfg_len = r.u32("config length")
    try:
        cfg_text = r.read(cfg_len, "config text").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"config text is not valid UTF-8: {e}", offset=r.pos) from None
    config, provenance = _parse_config_text(cfg_text)

    expected = parameter_shapes(config)
    count = r.u32("tensor count")
    if count != len(expected):
        raise IntegrityError(f"tensor count {count} != {len(expected)} implied by config", offset=r.pos - 4)
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name_len = r.u32("tensor name length")
        name = r.read(name_len, "tensor name").decode("utf-8")
        if name not in expected:
            raise IntegrityError(f"unknown tensor name {name!r}", offset=r.pos - name_len)
        rank = r.u8("tensor rank")
        shape = tuple(r.u32(f"dim {d} of {name}") for d in range(rank))
        if shape != expected[name]:
            raise IntegrityError(f"{name}: stored shape {shape} != expected {expected[name]}", offset=r.pos)
        nbytes = int(np.prod(shape)) * 4
        raw = r.read(nbytes, f"payload of {name}")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        tensors[name] = Tensor(data, requires_grad=True)
    if r.pos != len(payload):
        raise FormatError(f"{len(payload) - r.pos} trailing bytes after last tensor", offset=r.pos)
    if set(tensors) != set(expected):
        raise IntegrityError("tensor table does not cover every expected parameter", offset=r.pos)
    return Checkpoint(params=EncoderParams(config, tensors), config=config, provenance=provenance)
