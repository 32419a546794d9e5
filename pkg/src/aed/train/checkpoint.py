"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AEDC"                 magic
    u32                     format version
    u8                      precision tag: 32 or 64 (IEEE-754 bits per value)
    u32 + bytes             metadata: UTF-8 JSON (role, network config, training info)
    u32                     tensor count
    per tensor:
        u32 + bytes         UTF-8 name
        u32                 rank
        u64 * rank          dims
        bytes               raw little-endian payload
    u32                     CRC32 of every preceding byte

Loading validates the whole file before building anything, so a bad file
never yields a partially populated network.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..models import Network

MAGIC = b"AEDC"
VERSION = 1
_TAGS = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def encode_checkpoint(net: Network, metadata: dict | None = None) -> bytes:
    state = net.state()
    dtype = net.dtype
    bits = 32 if dtype == np.float32 else 64
    meta = {"role": net.role, "config": net.config, "training": metadata or {}}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<IB", VERSION, bits)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = state[name]
        if arr.dtype != dtype:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}, expected {dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_TAGS[bits]).tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[Network, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {version}; this build reads version {VERSION}")
    (bits,) = r.unpack("<B")
    if bits not in _TAGS:
        raise CorruptCheckpointError(f"unknown precision tag {bits}")
    dtype = _TAGS[bits]
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable metadata: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        payload = r.take(n * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{len(data) - r.pos} unexpected trailing bytes")
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("checksum mismatch")
    params = {k: v for k, v in tensors.items() if not k.startswith("buffer:")}
    buffers = {k[len("buffer:"):]: v for k, v in tensors.items() if k.startswith("buffer:")}
    try:
        net = Network(meta["role"], params, meta["config"], buffers)
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"metadata lacks {exc}") from None
    return net, meta.get("training", {})


def save_checkpoint(net: Network, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(net, metadata))


def load_checkpoint(path, with_metadata: bool = False):
    net, meta = decode_checkpoint(Path(path).read_bytes())
    return (net, meta) if with_metadata else net
