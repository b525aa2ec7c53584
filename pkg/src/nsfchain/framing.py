"""Length-prefixed tensor frames carried over the emulated byte streams.

Layout (little-endian)::

    total_len u32 | "NSF1" | kind u8 | dtype u8 | rank u8 | flags u8 |
    round u32 | epoch u32 | dims rank*u32 | labels_len u32 |
    labels labels_len*u32 | payload

``total_len`` counts the whole frame including itself and ``labels_len``
is a label count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import ProtocolError

MAGIC = b"NSF1"
ACTIVATION = 1
GRADIENT = 2
RESULT = 3
KIND_NAMES = {ACTIVATION: "act", GRADIENT: "grad", RESULT: "result"}

DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

# flag bits in the otherwise reserved header byte
FLAG_REJECTED = 0x01

_HEAD = struct.Struct("<I4sBBBBII")
_U32 = struct.Struct("<I")


class FrameError(ProtocolError):
    pass


@dataclass
class MessageFrame:
    kind: int
    round: int
    epoch: int
    data: np.ndarray
    labels: Optional[np.ndarray] = None
    flags: int = 0

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]

    @property
    def rejected(self) -> bool:
        return bool(self.flags & FLAG_REJECTED)

    def encode(self) -> bytes:
        if self.kind not in KIND_NAMES:
            raise FrameError(f"unknown frame kind {self.kind}")
        code = DTYPE_CODES.get(self.data.dtype.newbyteorder("="))
        if code is None:
            raise FrameError(f"unsupported dtype {self.data.dtype}")
        dims = self.data.shape
        labels = b""
        nlabels = 0
        if self.labels is not None:
            nlabels = len(self.labels)
            labels = np.asarray(self.labels, dtype="<u4").tobytes()
        payload = np.ascontiguousarray(self.data, dtype=DTYPES[code]).tobytes()
        body = b"".join([
            struct.pack(f"<{len(dims)}I", *dims),
            _U32.pack(nlabels),
            labels,
            payload,
        ])
        total = _HEAD.size + len(body)
        head = _HEAD.pack(total, MAGIC, self.kind, code, len(dims), self.flags,
                          self.round, self.epoch)
        return head + body

    @classmethod
    def decode(cls, data: bytes) -> "MessageFrame":
        if len(data) < _HEAD.size:
            raise FrameError("truncated frame header")
        total, magic, kind, code, rank, flags, rnd, epoch = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise FrameError(f"bad magic {magic!r}")
        if kind not in KIND_NAMES:
            raise FrameError(f"unknown frame kind {kind}")
        if code not in DTYPES:
            raise FrameError(f"unknown dtype code {code}")
        if total != len(data):
            raise FrameError(f"length prefix {total} != frame size {len(data)}")
        off = _HEAD.size
        need = off + 4 * rank + 4
        if len(data) < need:
            raise FrameError("truncated dims")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        (nlabels,) = _U32.unpack_from(data, off)
        off += 4
        if len(data) < off + 4 * nlabels:
            raise FrameError("truncated labels")
        labels = None
        if nlabels:
            labels = np.frombuffer(data, "<u4", nlabels, off).astype(np.int64)
            off += 4 * nlabels
        dt = DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        if len(data) - off != count * dt.itemsize:
            raise FrameError(
                f"payload is {len(data) - off} bytes, dims {list(dims)} need {count * dt.itemsize}"
            )
        arr = np.frombuffer(data, dt, count, off).reshape(dims).astype(dt.newbyteorder("="))
        return cls(kind, rnd, epoch, arr, labels, flags)


class ReassemblyBuffer:
    """Accumulates stream bytes and cuts them into frames."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self.expected: Optional[int] = None

    def __len__(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[MessageFrame]:
        self._buf += data
        frames = []
        while True:
            if self.expected is None:
                if len(self._buf) < 8:
                    break
                if self._buf[4:8] != MAGIC:
                    raise FrameError(f"bad magic {bytes(self._buf[4:8])!r}")
                self.expected = _U32.unpack_from(self._buf)[0]
                if self.expected < _HEAD.size:
                    raise FrameError(f"length prefix {self.expected} too small")
            if len(self._buf) < self.expected:
                break
            raw = bytes(self._buf[: self.expected])
            del self._buf[: self.expected]
            self.expected = None
            frames.append(MessageFrame.decode(raw))
        return frames


def reassemble(buf: ReassemblyBuffer, data: bytes) -> list[MessageFrame]:
    return buf.feed(data)
