"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MLPK" | version | tag_len | tag | spec_len | spec text (utf-8)
    | n_records | records... | crc32 of every preceding byte

Each record is ``name_len | name | dtype (1 = f32) | rank | dims... | payload``
with the payload raw little-endian float32. Records are written as
``<layer>.weight`` then ``<layer>.bias`` in spec order.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .network import NetworkSpec, WeightSet

MAGIC = b"MLPK"
VERSION = 1
DTYPE_F32 = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return _U32.pack(n)


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def dumps(spec: NetworkSpec, ws: WeightSet) -> bytes:
    ws.check(spec)
    parts = [MAGIC, _u32(VERSION), _text(ws.tag), _text(spec.to_text())]
    records = []
    for name in spec.weighted_layers:
        records.append((name + ".weight", ws.weights[name]))
        records.append((name + ".bias", ws.biases[name]))
    parts.append(_u32(len(records)))
    for key, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [_text(key), _u32(DTYPE_F32), _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        return self.take(self.u32(what + " length"), what).decode("utf-8")


def loads(buf: bytes) -> tuple[NetworkSpec, WeightSet]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    end = len(buf) - 4
    stored = _U32.unpack(buf[end:])[0]
    actual = zlib.crc32(buf[:end])
    if stored != actual:
        raise CheckpointError(f"CRC mismatch over bytes [0, {end}): stored 0x{stored:08x} at offset {end}, "
                              f"computed 0x{actual:08x}")
    r = _Reader(buf, end)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tag = r.text("tag")
    spec = NetworkSpec.from_text(r.text("spec"))
    weights, biases = {}, {}
    for _ in range(r.u32("record count")):
        key = r.text("record name")
        dtype = r.u32("dtype")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"record {key!r}: unknown dtype tag {dtype} at offset {r.pos - 4}")
        shape = tuple(r.u32("dim") for _ in range(r.u32("rank")))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, key), dtype="<f4").astype(np.float32).reshape(shape)
        layer, _, kind = key.rpartition(".")
        (weights if kind == "weight" else biases)[layer] = arr
    if r.pos != end:
        raise CheckpointError(f"{end - r.pos} trailing bytes before CRC at offset {r.pos}")
    ws = WeightSet(weights, biases, tag)
    ws.check(spec)
    return spec, ws


def save_checkpoint(path, spec: NetworkSpec, ws: WeightSet) -> None:
    Path(path).write_bytes(dumps(spec, ws))


def load_checkpoint(path) -> tuple[NetworkSpec, WeightSet]:
    return loads(Path(path).read_bytes())
