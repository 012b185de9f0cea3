"""Binary checkpoint container of named tensors with a CRC-32 trailer.

Layout (all integers little-endian)::

    b"SLSD"  u32 version  u64 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype tag, u8 rank, u64 dims[rank], raw payload
    u32 CRC-32 of every preceding byte

Dtype tags: 0 float32, 1 uint8, 2 float64, 3 int64. Non-tensor state (network
config, counters, seeds) travels as a JSON document in the uint8 tensor
``__meta__``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SLSD"
FORMAT_VERSION = 1
META_KEY = "__meta__"

_TAGS = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not an SLSD checkpoint (bad magic or truncated header)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 16
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"tensor {name!r} payload truncated")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    return out


@dataclass
class Checkpoint:
    network_config: dict
    model_state: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_t: int = 0
    step: int = 0
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        meta = {
            "network_config": self.network_config,
            "adam_t": self.adam_t,
            "step": self.step,
            "epoch": self.epoch,
            "meta": self.meta,
        }
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        tensors = OrderedDict([(META_KEY, np.frombuffer(blob, dtype=np.uint8))])
        for name, arr in self.model_state.items():
            tensors[f"model.{name}"] = arr
        for name, arr in self.adam_m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in self.adam_v.items():
            tensors[f"adam.v.{name}"] = arr
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict) -> "Checkpoint":
        if META_KEY not in tensors:
            raise CheckpointError(f"checkpoint lacks the {META_KEY!r} record")
        meta = json.loads(tensors[META_KEY].tobytes().decode("utf-8"))
        groups = {"model.": OrderedDict(), "adam.m.": OrderedDict(), "adam.v.": OrderedDict()}
        for name, arr in tensors.items():
            for prefix, bucket in groups.items():
                if name.startswith(prefix):
                    bucket[name[len(prefix):]] = arr
                    break
        return cls(meta["network_config"], groups["model."], groups["adam.m."], groups["adam.v."],
                   meta["adam_t"], meta["step"], meta["epoch"], meta["meta"])


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_tensors(ckpt.to_tensors())
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_tensors(decode_tensors(Path(path).read_bytes()))
