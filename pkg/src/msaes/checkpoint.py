"""Binary checkpoint format.

Layout, all integers little-endian::

    b"MSAS" | version u32 | header length u64 | UTF-8 JSON header | pad | payload

The header maps each tensor name to its dtype, shape and byte offset into
the payload, records the payload size, and carries the run-config hash plus
free-form metadata (config snapshot, metrics, epoch, vocabulary). The
payload starts on a 64-byte boundary and every tensor inside it is 64-byte
aligned. Tensors are stored as float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MSAS"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sIQ")
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: str
    meta: dict = field(default_factory=dict)


def _aligned(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, offset = {}, 0
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value)
        entries[name] = {"dtype": _DTYPE.str, "shape": list(arr.shape), "offset": offset}
        offset = _aligned(offset + arr.size * _DTYPE.itemsize)
    header = {"config_hash": ckpt.config_hash, "payload_bytes": offset, "tensors": entries, "meta": ckpt.meta}
    header = json.dumps(header, separators=(",", ":")).encode("utf-8")
    start = _aligned(_PREFIX.size + len(header))
    buf = bytearray(start + offset)
    _PREFIX.pack_into(buf, 0, MAGIC, VERSION, len(header))
    buf[_PREFIX.size:_PREFIX.size + len(header)] = header
    for name, value in ckpt.tensors.items():
        raw = np.ascontiguousarray(value, dtype=_DTYPE).tobytes()
        pos = start + entries[name]["offset"]
        buf[pos:pos + len(raw)] = raw
    return bytes(buf)


def from_bytes(buf: bytes, expected_hash: str | None = None) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigMismatchError(
            f"checkpoint was written by config {header['config_hash'][:12]}, expected {expected_hash[:12]}")
    start = _aligned(_PREFIX.size + hlen)
    if len(buf) != start + header.get("payload_bytes", -1):
        raise CheckpointError(f"checkpoint size {len(buf)} does not match its header")
    tensors = {}
    for name, e in header["tensors"].items():
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        pos = start + e["offset"]
        if pos + count * dtype.itemsize > len(buf):
            raise CheckpointError(f"tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(buf, dtype, count, pos).reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, header["config_hash"], header.get("meta", {}))


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_hash)
