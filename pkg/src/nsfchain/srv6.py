"""SRv6-style packet model: SRH wire codec, SR-source encapsulation,
segment-endpoint processing and return-path SRH reversal.

Addresses and SIDs share one 128-bit space and are represented by
:class:`ipaddress.IPv6Address`.

SRH layout (big-endian)::

    0                   1                   2                   3
    0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
   +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
   | Next Header   |  Hdr Ext Len  | Routing Type  | Segments Left |
   +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
   |  Last Entry   |     Flags     |              Tag              |
   +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
   |            Segment List[0] (128 bits) ... Segment List[M-1]   |
   +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

Sid = ipaddress.IPv6Address
Address = ipaddress.IPv6Address

PROTO_TCP = 6
PROTO_IPV6 = 41
PROTO_ROUTING = 43
ROUTING_TYPE_SRH = 4

IPV6_HEADER_LEN = 40
TRANSPORT_HEADER_LEN = 12
SRH_FIXED_LEN = 8
SID_LEN = 16
MAX_SEGMENTS = 255

_SRH_FIXED = struct.Struct(">BBBBBBH")
_IPV6_FIXED = struct.Struct(">IHBB")
_TRANSPORT = struct.Struct(">HHQ")


class SrhError(ValueError):
    """Base class for SRH codec failures."""


class InvalidSrh(SrhError):
    """An SRH value violates its structural invariants."""


class MalformedSrh(SrhError):
    """Bytes on the wire do not decode to a valid SRH."""


def sid(value: Union[str, int, bytes, Address]) -> Address:
    """Coerce text, an int or 16 raw bytes into a SID/address."""
    if isinstance(value, ipaddress.IPv6Address):
        return value
    return ipaddress.IPv6Address(value)


@dataclass(frozen=True)
class Ipv6Header:
    src: Address
    dst: Address
    next_header: int = PROTO_TCP
    payload_len: int = 0
    hop_limit: int = 64

    def encode(self) -> bytes:
        first_word = 6 << 28
        return (
            _IPV6_FIXED.pack(first_word, self.payload_len, self.next_header, self.hop_limit)
            + self.src.packed
            + self.dst.packed
        )

    @classmethod
    def decode(cls, data: bytes) -> "Ipv6Header":
        if len(data) < IPV6_HEADER_LEN:
            raise ValueError("truncated IPv6 header")
        word, plen, nh, hl = _IPV6_FIXED.unpack_from(data)
        if word >> 28 != 6:
            raise ValueError("not an IPv6 header")
        return cls(Address(bytes(data[8:24])), Address(bytes(data[24:40])), nh, plen, hl)


@dataclass(frozen=True)
class Srh:
    """Segment Routing Header.

    ``segment_list`` is stored in reverse traversal order: index 0 is the
    final segment, ``segment_list[segments_left]`` the active one.
    """

    segment_list: tuple[Address, ...]
    segments_left: int
    next_header: int = PROTO_IPV6
    flags: int = 0
    tag: int = 0

    def __post_init__(self) -> None:
        m = len(self.segment_list)
        if m == 0 or m > MAX_SEGMENTS:
            raise InvalidSrh(f"segment list length {m} outside 1..{MAX_SEGMENTS}")
        if not 0 <= self.segments_left <= m - 1:
            raise InvalidSrh(f"segments_left {self.segments_left} outside 0..{m - 1}")

    @property
    def last_entry(self) -> int:
        return len(self.segment_list) - 1

    @property
    def hdr_ext_len(self) -> int:
        return 2 * len(self.segment_list)

    @property
    def active_sid(self) -> Address:
        return self.segment_list[self.segments_left]

    @property
    def traversal(self) -> tuple[Address, ...]:
        """Segments in visit order."""
        return tuple(reversed(self.segment_list))

    @property
    def wire_len(self) -> int:
        return SRH_FIXED_LEN + SID_LEN * len(self.segment_list)


def encode_srh(srh: Srh) -> bytes:
    m = len(srh.segment_list)
    if m == 0 or m > MAX_SEGMENTS:
        raise InvalidSrh(f"segment list length {m} outside 1..{MAX_SEGMENTS}")
    head = _SRH_FIXED.pack(
        srh.next_header, 2 * m, ROUTING_TYPE_SRH, srh.segments_left, m - 1, srh.flags, srh.tag
    )
    return head + b"".join(s.packed for s in srh.segment_list)


def decode_srh(data: bytes) -> Srh:
    if len(data) < SRH_FIXED_LEN:
        raise MalformedSrh(f"need {SRH_FIXED_LEN} bytes, got {len(data)}")
    nh, ext_len, rtype, sl, last, flags, tag = _SRH_FIXED.unpack_from(data)
    if rtype != ROUTING_TYPE_SRH:
        raise MalformedSrh(f"routing type {rtype} is not SRH ({ROUTING_TYPE_SRH})")
    if ext_len != 2 * (last + 1):
        raise MalformedSrh(f"hdr_ext_len {ext_len} inconsistent with last_entry {last}")
    if sl > last:
        raise MalformedSrh(f"segments_left {sl} exceeds last_entry {last}")
    m = last + 1
    end = SRH_FIXED_LEN + SID_LEN * m
    if len(data) < end:
        raise MalformedSrh(f"truncated segment list: need {end} bytes, got {len(data)}")
    segs = tuple(
        Address(bytes(data[off : off + SID_LEN])) for off in range(SRH_FIXED_LEN, end, SID_LEN)
    )
    return Srh(segs, sl, nh, flags, tag)


@dataclass(frozen=True)
class FiveTuple:
    protocol: int
    src_addr: Address
    dst_addr: Address
    src_port: int
    dst_port: int

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.protocol, self.dst_addr, self.src_addr, self.dst_port, self.src_port)

    def __str__(self) -> str:
        return f"{self.protocol}|{self.src_addr}|{self.dst_addr}|{self.src_port}|{self.dst_port}"


@dataclass(frozen=True)
class InnerPacket:
    """A plain (non-encapsulated) packet: IPv6-like header + stream transport."""

    header: Ipv6Header
    src_port: int
    dst_port: int
    seq: int = 0
    payload: bytes = b""

    @classmethod
    def make(cls, src: Address, dst: Address, src_port: int, dst_port: int,
             seq: int = 0, payload: bytes = b"") -> "InnerPacket":
        hdr = Ipv6Header(src, dst, PROTO_TCP, TRANSPORT_HEADER_LEN + len(payload))
        return cls(hdr, src_port, dst_port, seq, payload)

    @property
    def wire_len(self) -> int:
        return IPV6_HEADER_LEN + TRANSPORT_HEADER_LEN + len(self.payload)

    def to_bytes(self) -> bytes:
        return (
            self.header.encode()
            + _TRANSPORT.pack(self.src_port, self.dst_port, self.seq)
            + self.payload
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "InnerPacket":
        hdr = Ipv6Header.decode(data)
        body = data[IPV6_HEADER_LEN : IPV6_HEADER_LEN + hdr.payload_len]
        sp, dp, seq = _TRANSPORT.unpack_from(body)
        return cls(hdr, sp, dp, seq, bytes(body[TRANSPORT_HEADER_LEN:]))


@dataclass(frozen=True)
class Srv6Packet:
    outer: Ipv6Header
    srh: Srh
    inner: InnerPacket

    @property
    def encap_overhead(self) -> int:
        return IPV6_HEADER_LEN + self.srh.wire_len

    @property
    def wire_len(self) -> int:
        return self.encap_overhead + self.inner.wire_len

    def to_bytes(self) -> bytes:
        return self.outer.encode() + encode_srh(self.srh) + self.inner.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Srv6Packet":
        outer = Ipv6Header.decode(data)
        if outer.next_header != PROTO_ROUTING:
            raise MalformedSrh(f"outer next_header {outer.next_header} is not a routing header")
        srh = decode_srh(data[IPV6_HEADER_LEN:])
        inner = InnerPacket.from_bytes(data[IPV6_HEADER_LEN + srh.wire_len :])
        return cls(outer, srh, inner)


Packet = Union[InnerPacket, Srv6Packet]


def outer_header_for(src: Address, srh: Srh, inner: InnerPacket) -> Ipv6Header:
    return Ipv6Header(src, srh.active_sid, PROTO_ROUTING, srh.wire_len + inner.wire_len)


def encapsulate(inner: InnerPacket, traversal: Sequence[Address], source: Address) -> Srv6Packet:
    """SR-source encapsulation: visit ``traversal`` in order, then decap."""
    if not traversal:
        raise InvalidSrh("empty traversal list")
    srh = Srh(tuple(reversed(tuple(traversal))), len(traversal) - 1)
    return Srv6Packet(outer_header_for(source, srh, inner), srh, inner)


def reencapsulate(inner: InnerPacket, outer: Ipv6Header, srh: Srh) -> Srv6Packet:
    """Encapsulate with a stored outer header and SRH (SFC-proxy egress)."""
    hdr = replace(outer, payload_len=srh.wire_len + inner.wire_len)
    return Srv6Packet(hdr, srh, inner)


@dataclass(frozen=True)
class Forward:
    packet: Srv6Packet


@dataclass(frozen=True)
class DecapForward:
    inner: InnerPacket
    # header state at decapsulation, kept for return-path state
    outer: Optional[Ipv6Header] = field(default=None, compare=False)
    srh: Optional[Srh] = field(default=None, compare=False)


@dataclass(frozen=True)
class NotMine:
    packet: Srv6Packet


EndpointAction = Union[Forward, DecapForward, NotMine]


def process_endpoint(pkt: Srv6Packet, local_sid: Address) -> EndpointAction:
    if pkt.outer.dst != local_sid:
        return NotMine(pkt)
    if pkt.srh.segments_left > 0:
        srh = replace(pkt.srh, segments_left=pkt.srh.segments_left - 1)
        outer = replace(pkt.outer, dst=srh.active_sid)
        return Forward(Srv6Packet(outer, srh, pkt.inner))
    return DecapForward(pkt.inner, pkt.outer, pkt.srh)


def reverse_srh(srh: Srh, new_source: Address | None = None,
                new_final_dst: Address | None = None) -> Srh:
    """SRH for return traffic: the forward traversal walked backwards.

    ``new_source`` is dropped from the head of the reversed traversal (the
    node reversing the path has already been visited); ``new_final_dst`` is
    appended as the final segment.
    """
    order = list(reversed(srh.traversal))
    if new_source is not None and order[0] == new_source:
        order = order[1:]
    if new_final_dst is not None and (not order or order[-1] != new_final_dst):
        order.append(new_final_dst)
    if not order:
        raise InvalidSrh("reversal leaves no segments")
    return Srh(tuple(reversed(order)), len(order) - 1, srh.next_header, srh.flags, srh.tag)


def five_tuple_of(pkt: Packet) -> FiveTuple:
    inner = pkt.inner if isinstance(pkt, Srv6Packet) else pkt
    return FiveTuple(PROTO_TCP, inner.header.src, inner.header.dst, inner.src_port, inner.dst_port)


def format_traversal(segments: Iterable[Address]) -> str:
    return ",".join(str(s) for s in segments)
