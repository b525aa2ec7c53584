import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nsfchain.framing import (
    ACTIVATION,
    FLAG_REJECTED,
    GRADIENT,
    RESULT,
    FrameError,
    MessageFrame,
    ReassemblyBuffer,
    reassemble,
)


def _same(a, b):
    assert (a.kind, a.round, a.epoch, a.flags) == (b.kind, b.round, b.epoch, b.flags)
    assert a.data.dtype == b.data.dtype
    assert np.array_equal(a.data, b.data)
    if a.labels is None:
        assert b.labels is None
    else:
        assert np.array_equal(a.labels, b.labels)


def test_header_layout():
    f = MessageFrame(ACTIVATION, 3, 2, np.zeros((2, 5), dtype=np.float32))
    raw = f.encode()
    assert int.from_bytes(raw[:4], "little") == len(raw)
    assert raw[4:8] == b"NSF1"
    assert raw[8] == ACTIVATION and raw[9] == 1 and raw[10] == 2 and raw[11] == 0
    assert int.from_bytes(raw[12:16], "little") == 3
    assert int.from_bytes(raw[16:20], "little") == 2
    assert int.from_bytes(raw[20:24], "little") == 2
    assert int.from_bytes(raw[24:28], "little") == 5
    assert int.from_bytes(raw[28:32], "little") == 0
    assert len(raw) == 32 + 2 * 5 * 4


@given(
    st.sampled_from([ACTIVATION, GRADIENT, RESULT]),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.sampled_from([np.float32, np.float64]).flatmap(
        lambda dt: arrays(dt, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                          elements=st.floats(-1e6, 1e6, width=32))),
    st.booleans(),
    st.sampled_from([0, FLAG_REJECTED]),
)
def test_round_trip(kind, rnd, epoch, data, with_labels, flags):
    labels = np.arange(data.shape[0]) if with_labels else None
    f = MessageFrame(kind, rnd, epoch, data, labels, flags)
    _same(f, MessageFrame.decode(f.encode()))


def test_rejected_flag():
    f = MessageFrame(RESULT, 0, 0, np.zeros((1, 1)), flags=FLAG_REJECTED)
    assert MessageFrame.decode(f.encode()).rejected


def test_segmented_activation():
    mss = 8960
    f = MessageFrame(ACTIVATION, 1, 1, np.ones((1, 4096), dtype=np.float32))
    raw = f.encode()
    chunks = [raw[i:i + mss] for i in range(0, len(raw), mss)]
    assert len(chunks) == math.ceil((16384 + 32) / mss) == 2
    buf = ReassemblyBuffer()
    assert reassemble(buf, chunks[0]) == []
    out = reassemble(buf, chunks[1])
    assert len(out) == 1
    _same(f, out[0])
    assert len(buf) == 0


def test_two_frames_one_feed():
    a = MessageFrame(GRADIENT, 1, 1, np.ones((1, 2), dtype=np.float32))
    b = MessageFrame(GRADIENT, 2, 1, np.zeros((1, 3), dtype=np.float32))
    buf = ReassemblyBuffer()
    out = buf.feed(a.encode() + b.encode()[:10])
    assert len(out) == 1
    out += buf.feed(b.encode()[10:])
    assert [f.round for f in out] == [1, 2]


def test_byte_at_a_time():
    f = MessageFrame(RESULT, 9, 0, np.arange(6, dtype=np.float64).reshape(2, 3))
    buf = ReassemblyBuffer()
    got = []
    for byte in f.encode():
        got += buf.feed(bytes([byte]))
    assert len(got) == 1
    _same(f, got[0])


def test_corruption():
    raw = bytearray(MessageFrame(ACTIVATION, 0, 0, np.zeros((1, 2), dtype=np.float32)).encode())
    bad = bytearray(raw)
    bad[5] = ord("X")
    with pytest.raises(FrameError):
        ReassemblyBuffer().feed(bytes(bad))
    bad = bytearray(raw)
    bad[9] = 7
    with pytest.raises(FrameError):
        MessageFrame.decode(bytes(bad))
    with pytest.raises(FrameError):
        MessageFrame.decode(bytes(raw[:-1]))
    with pytest.raises(FrameError):
        MessageFrame(9, 0, 0, np.zeros((1, 1))).encode()
