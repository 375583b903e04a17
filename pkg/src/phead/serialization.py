"""Little-endian binary helpers and the CRC-64 used by every model file."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import crcmod.predefined
import numpy as np

from .errors import CorruptionError, FormatError

# CRC-64/WE (ECMA-182 polynomial, init and xorout all ones)
crc64 = crcmod.predefined.mkPredefinedCrcFun("crc-64-we")

CRC_BYTES = 8


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def f32(self, v: float) -> None:
        self.parts.append(struct.pack("<f", v))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def array(self, a: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<Q", crc64(body))


class Reader:
    def __init__(self, blob: bytes, magic: bytes):
        if len(blob) < len(magic) + CRC_BYTES:
            raise FormatError("file too short")
        body, tail = blob[:-CRC_BYTES], blob[-CRC_BYTES:]
        (stored,) = struct.unpack("<Q", tail)
        if crc64(body) != stored:
            raise CorruptionError("CRC-64 mismatch: file is corrupted")
        if body[: len(magic)] != magic:
            raise FormatError(f"bad magic {body[:len(magic)]!r}, expected {magic!r}")
        self.buf = body
        self.pos = len(magic)

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of file")
        b = self.buf[self.pos: self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def string(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self._take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes before checksum")


def weights_digest(arrays) -> int:
    """CRC-64 over the little-endian f32 bytes of ``arrays`` in order."""
    crc = crc64(b"")
    for a in arrays:
        crc = crc64(np.ascontiguousarray(a, dtype="<f4").tobytes(), crc)
    return crc


def atomic_write(path: str | os.PathLike, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
