"""VRCKPT checkpoint container.

Little-endian layout::

    b"VRCKPT"  version:u8
    config_len:u32  config text (UTF-8 ``key=value`` lines)
    n_blocks:u32
    per block: name_len:u16 name rank:u8 extents:u32*rank values:f32*prod(extents)
    crc32:u32 over everything before it
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ArchitectureConfig, VariableRateModel

MAGIC = b"VRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str] = field(default_factory=dict)
    blocks: dict[str, np.ndarray] = field(default_factory=dict)


def format_config(config: dict[str, str]) -> str:
    lines = []
    for key, value in config.items():
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"config entry {key!r} cannot be stored as a key=value line")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        out[key.strip()] = value.strip()
    return out


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    text = format_config(ckpt.config).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(ckpt.blocks))]
    for name, array in ckpt.blocks.items():
        raw = name.encode("utf-8")
        array = np.asarray(array)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", array.ndim)]
        parts += [struct.pack(f"<{array.ndim}I", *array.shape), array.astype("<f4").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 13 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a VRCKPT checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<B", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 1

    def take(fmt: str):
        nonlocal pos
        values = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return values

    try:
        (n,) = take("<I")
        config = parse_config(body[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = take("<I")
        blocks = {}
        for _ in range(count):
            (n,) = take("<H")
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = take("<B")
            shape = take(f"<{rank}I")
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"block {name!r} is truncated")
            blocks[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last block")
    return Checkpoint(config, blocks)


def write(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def read(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


ARCH_PREFIX = "arch."


LAMBDAS_KEY = "lambdas"


def model_checkpoint(model: VariableRateModel, extra: dict[str, str] | None = None,
                     lambdas: Sequence[float] | None = None) -> Checkpoint:
    config = {ARCH_PREFIX + k: v for k, v in model.config.to_dict().items()}
    if lambdas is not None:
        if len(lambdas) != model.config.n_lambdas:
            raise CheckpointError(f"{len(lambdas)} lambda values for a {model.config.n_lambdas}-slot model")
        config[LAMBDAS_KEY] = ",".join(repr(float(v)) for v in lambdas)
    config.update(extra or {})
    return Checkpoint(config, {"param/" + k: v for k, v in model.state_dict().items()})


def model_from_checkpoint(ckpt: Checkpoint) -> VariableRateModel:
    arch = {k[len(ARCH_PREFIX):]: v for k, v in ckpt.config.items() if k.startswith(ARCH_PREFIX)}
    model = VariableRateModel(ArchitectureConfig.from_dict(arch))
    params = {k[len("param/"):]: v for k, v in ckpt.blocks.items() if k.startswith("param/")}
    model.load_state_dict(params)
    return model


def lambdas_from_checkpoint(ckpt: Checkpoint) -> tuple[float, ...] | None:
    raw = ckpt.config.get(LAMBDAS_KEY)
    return tuple(float(v) for v in raw.split(",")) if raw else None


def save_model(path: str | Path, model: VariableRateModel, lambdas: Sequence[float] | None = None,
               extra: dict[str, str] | None = None) -> None:
    write(path, model_checkpoint(model, extra, lambdas))


def load_model(path: str | Path) -> tuple[VariableRateModel, tuple[float, ...] | None]:
    """The model and, when recorded, the lambda value behind each index."""
    ck = read(path)
    return model_from_checkpoint(ck), lambdas_from_checkpoint(ck)
