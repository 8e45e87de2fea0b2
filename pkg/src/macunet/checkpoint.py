"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MACU"                         magic
    u32 version                     currently 1
    u8 len + ascii variant
    u32 levels, base_width, classes, in_channels, cab_ratio
    u8 fused flag
    u32 tensor count
    per tensor, sorted by name:
        u16 len + utf-8 name, u8 rank, u32 dims..., f32 payload
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .models import Network, NetworkConfig, build_network, fuse_network

MAGIC = b"MACU"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def dumps(net: Network) -> bytes:
    cfg = net.cfg
    variant = cfg.variant.encode("ascii")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<B", len(variant)), variant,
             struct.pack("<5I", cfg.levels, cfg.base_width, cfg.classes, cfg.in_channels,
                         cfg.cab_ratio),
             struct.pack("<B", int(net.fused))]
    state = net.state_dict()
    names = sorted(state)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError("checkpoint ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(data: bytes) -> tuple[NetworkConfig, bool, dict[str, np.ndarray]]:
    """Decode bytes into ``(config, fused, tensors)`` after integrity checks."""
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise TruncatedCheckpointError("checkpoint ends early")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise IntegrityError("CRC32 mismatch: checkpoint is corrupted")
    (vlen,) = r.unpack("<B")
    variant = r.take(vlen).decode("ascii")
    levels, base, classes, in_ch, ratio = r.unpack("<5I")
    (fused,) = r.unpack("<B")
    cfg = NetworkConfig(variant=variant, levels=levels, base_width=base, classes=classes,
                        in_channels=in_ch, cab_ratio=ratio)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return cfg, bool(fused), tensors


def load_checkpoint(path: Union[str, Path], expect: Optional[NetworkConfig] = None) -> Network:
    """Rebuild the network stored at ``path``.

    With ``expect``, the stored configuration must match it.
    """
    cfg, fused, tensors = parse(Path(path).read_bytes())
    if expect is not None and expect != cfg:
        raise ConfigMismatchError(f"checkpoint holds {cfg}, expected {expect}")
    net = build_network(cfg, seed=0, dtype=np.float32)
    if fused:
        net = fuse_network(net)
    net.load_state_dict(tensors)
    return net
