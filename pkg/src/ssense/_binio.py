"""Little-endian helpers for the SSPR / SSEN / SSWT / SSTX container formats."""
import hashlib
import json
import struct

import numpy as np

from .errors import ValidationError


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def magic(self, tag: bytes, version: int):
        self.fh.write(tag)
        self.u32(version)

    def u8(self, v):
        self.fh.write(struct.pack("<B", v))

    def u32(self, v):
        self.fh.write(struct.pack("<I", v))

    def u64(self, v):
        self.fh.write(struct.pack("<Q", v))

    def f64(self, v):
        self.fh.write(struct.pack("<d", v))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.fh.write(raw)

    def raw(self, b: bytes):
        self.fh.write(b)

    def f32_array(self, a):
        self.fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


class Reader:
    def __init__(self, data: bytes, source="<buffer>"):
        self.data = data
        self.pos = 0
        self.source = source

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise ValidationError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, tag: bytes, supported=(1,)) -> int:
        got = self._take(len(tag))
        if got != tag:
            raise ValidationError(f"{self.source}: bad magic {got!r}, expected {tag!r}")
        version = self.u32()
        if version not in supported:
            raise ValidationError(f"{self.source}: unsupported version {version}")
        return version

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def raw(self, n) -> bytes:
        return self._take(n)

    def f32_array(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        buf = self._take(4 * count)
        return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)

    def done(self):
        if self.pos != len(self.data):
            raise ValidationError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")
