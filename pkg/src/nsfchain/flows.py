"""SFC-proxy flow association: 5-tuple -> (outer header, SRH).

Ingress decapsulation stores the header state per inner flow, egress
re-encapsulates matching packets, and :meth:`FlowTable.rekey` binds the
connection an NSF opens downstream to the connection it intercepted.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Union

from .srv6 import (
    Address,
    DecapForward,
    FiveTuple,
    Forward,
    InnerPacket,
    Ipv6Header,
    Srh,
    Srv6Packet,
    encode_srh,
    five_tuple_of,
    process_endpoint,
    reencapsulate,
)

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 4096
DEFAULT_IDLE_TIMEOUT_NS = 300 * 1_000_000_000


class FlowTableError(Exception):
    pass


class MissingFlow(FlowTableError, KeyError):
    """Rekey of a flow that was never stored at ingress."""


@dataclass(frozen=True)
class FlowValue:
    outer: Ipv6Header
    srh: Srh


@dataclass
class _Entry:
    value: FlowValue
    last_used: int
    # keys rekeyed from this one; refreshed whenever this entry is overwritten
    aliases: set = field(default_factory=set)


@dataclass(frozen=True)
class PassThrough:
    packet: InnerPacket


class FlowTable:
    """Exact-match flow table with LRU eviction and an idle timeout."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 idle_timeout_ns: Optional[int] = DEFAULT_IDLE_TIMEOUT_NS,
                 owner: str = ""):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.idle_timeout_ns = idle_timeout_ns
        self.owner = owner
        self._entries: OrderedDict[FiveTuple, _Entry] = OrderedDict()
        self.evictions: list[FiveTuple] = []
        self.passthrough_count = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FiveTuple) -> bool:
        return key in self._entries

    def get(self, key: FiveTuple, now: int = 0) -> Optional[FlowValue]:
        entry = self._entries.get(key)
        if entry is None:
            return None
        if self.idle_timeout_ns is not None and now - entry.last_used > self.idle_timeout_ns:
            self._drop(key)
            return None
        entry.last_used = now
        self._entries.move_to_end(key)
        return entry.value

    def keys(self) -> list[FiveTuple]:
        return list(self._entries)

    def put(self, key: FiveTuple, value: FlowValue, now: int = 0) -> None:
        entry = self._entries.get(key)
        if entry is not None:
            entry.value = value
            entry.last_used = now
            self._entries.move_to_end(key)
            for alias in sorted(entry.aliases, key=str):
                alias_entry = self._entries.get(alias)
                if alias_entry is not None:
                    alias_entry.value = value
            return
        if len(self._entries) >= self.capacity:
            oldest = next(iter(self._entries))
            log.warning("flow table %s full (%d); evicting %s", self.owner, self.capacity, oldest)
            self.evictions.append(oldest)
            self._drop(oldest)
        self._entries[key] = _Entry(value, now)

    def _drop(self, key: FiveTuple) -> None:
        del self._entries[key]
        for entry in self._entries.values():
            entry.aliases.discard(key)

    def rekey(self, old_flow: FiveTuple, new_flow: FiveTuple, now: int = 0) -> None:
        entry = self._entries.get(old_flow)
        if entry is None:
            raise MissingFlow(old_flow)
        if new_flow == old_flow:
            return
        self.put(new_flow, entry.value, now)
        entry.aliases.add(new_flow)

    def to_json(self) -> dict:
        return {
            str(k): {
                "srh": encode_srh(e.value.srh).hex(),
                "outer_src": str(e.value.outer.src),
                "outer_dst": str(e.value.outer.dst),
            }
            for k, e in sorted(self._entries.items(), key=lambda kv: str(kv[0]))
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def ingress_decap(pkt: Srv6Packet, local_sid: Address, table: FlowTable,
                  now: int = 0) -> Optional[InnerPacket]:
    """Decapsulate a packet addressed to ``local_sid`` and remember its headers.

    The stored SRH already reflects endpoint processing at this node, so a
    later :func:`egress_encap` sends toward the next segment. Returns
    ``None`` (table untouched) when the packet is not for this node.
    """
    action = process_endpoint(pkt, local_sid)
    if isinstance(action, Forward):
        outer, srh = action.packet.outer, action.packet.srh
    elif isinstance(action, DecapForward):
        outer, srh = action.outer, action.srh
    else:
        return None
    table.put(five_tuple_of(pkt.inner), FlowValue(outer, srh), now)
    return pkt.inner


def egress_encap(pkt: InnerPacket, table: FlowTable,
                 now: int = 0) -> Union[Srv6Packet, PassThrough]:
    value = table.get(five_tuple_of(pkt), now)
    if value is None:
        table.passthrough_count += 1
        return PassThrough(pkt)
    return reencapsulate(pkt, value.outer, value.srh)


def rekey(table: FlowTable, old_flow: FiveTuple, new_flow: FiveTuple, now: int = 0) -> None:
    table.rekey(old_flow, new_flow, now)
