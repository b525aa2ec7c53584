"""Substrate network: bandwidth-limited FIFO links, static routing, an
SRv6-aware node stack and reliable in-order byte streams.

Data moves as *trains*: every message written to a stream is cut into
MSS-sized packets that share one header. Node logic runs once per train
when its first packet arrives, while per-packet timing (store-and-forward,
FIFO per link direction) is exact via :mod:`.kernel`. The SR policy and
flow-table state a train sees are therefore pinned at its head packet,
which keeps each stream in order.
"""

from __future__ import annotations

import bisect
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

import numpy as np

from .. import flows
from ..srv6 import (
    IPV6_HEADER_LEN,
    TRANSPORT_HEADER_LEN,
    Address,
    DecapForward,
    FiveTuple,
    Forward,
    InnerPacket,
    Srv6Packet,
    encapsulate,
    five_tuple_of,
    outer_header_for,
    process_endpoint,
    reverse_srh,
)
from . import kernel
from .engine import NS_PER_S, Simulator
from .topology import ConfigError, LinkSpec, NodeSpec, TopologyConfig, bfs_next_hops, natural_key

log = logging.getLogger(__name__)

PACKET_HEADERS = IPV6_HEADER_LEN + TRANSPORT_HEADER_LEN


class RoutingError(RuntimeError):
    pass


class LinkDirection:
    """One direction of a link: a FIFO transmitter with a rate schedule."""

    def __init__(self, spec: LinkSpec, u: str, v: str):
        self.u, self.v = u, v
        self.base_bps = spec.bw_bps
        self.delay_ns = spec.delay_ns
        self.mtu = spec.mtu
        self.free_at = 0
        self._times = [0]
        self._rates = [spec.bw_bps]
        self._sync()

    def _sync(self) -> None:
        self.sched_t = np.array(self._times, dtype=np.int64)
        self.sched_r = np.array(self._rates, dtype=np.int64)

    @property
    def schedule(self) -> list[tuple[int, int]]:
        return list(zip(self._times, self._rates))

    def rate_at(self, t: int) -> int:
        return self._rates[bisect.bisect_right(self._times, t) - 1]

    def set_bandwidth(self, bw_bps: int, at_ns: int, restore_ns: Optional[int] = None) -> None:
        if bw_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if restore_ns is not None and restore_ns <= at_ns:
            raise ValueError("restore time must follow the change")
        points = list(zip(self._times, self._rates))
        restore_rate = self.rate_at(restore_ns) if restore_ns is not None else None
        keep = [(t, r) for t, r in points if t < at_ns]
        keep.append((at_ns, bw_bps))
        if restore_ns is not None:
            keep.append((restore_ns, restore_rate))
            keep += [(t, r) for t, r in points if t > restore_ns]
        merged: list[tuple[int, int]] = []
        for t, r in keep:
            if merged and merged[-1][1] == r:
                continue
            merged.append((t, r))
        self._times = [t for t, _ in merged]
        self._rates = [r for _, r in merged]
        self._sync()

    def capacity_avg(self, t0: int, t1: int) -> float:
        """Time-averaged configured capacity over [t0, t1]."""
        if t1 <= t0:
            return float(self.rate_at(t1))
        total = 0
        bounds = self._times[1:] + [None]
        for start, end, rate in zip(self._times, bounds, self._rates):
            lo = max(start, t0)
            hi = t1 if end is None else min(end, t1)
            if hi > lo:
                total += (hi - lo) * rate
        return total / (t1 - t0)

    def transmit(self, size: int, t: int) -> int:
        """Send one packet of ``size`` wire bytes, ready at ``t``; returns its arrival."""
        start = max(t, self.free_at)
        rate = self.rate_at(start)
        self.free_at = start + (size * 8 * NS_PER_S + rate - 1) // rate
        return self.free_at + self.delay_ns

    def transmit_train(self, ready: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        arrivals, self.free_at = kernel.hop_arrivals(
            ready, sizes, self.delay_ns, self.free_at, self.sched_t, self.sched_r
        )
        return arrivals


@dataclass
class SrPolicy:
    """SR-source steering: traffic to (dst, port) is encapsulated with ``traversal``."""

    dst: Address
    port: Optional[int]
    traversal: list[Address]

    def matches(self, pkt: InnerPacket) -> bool:
        return pkt.header.dst == self.dst and (self.port is None or pkt.dst_port == self.port)


@dataclass
class Train:
    id: int
    origin: str
    head: Any  # InnerPacket | Srv6Packet shared by every packet of the train
    data: bytes
    mss: int
    t_send: int
    meta: dict
    ready: np.ndarray = None  # type: ignore[assignment]
    lens: np.ndarray = None  # type: ignore[assignment]
    send_end: Optional[int] = None
    path: list = field(default_factory=list)
    hop_bytes: list = field(default_factory=list)

    def __post_init__(self) -> None:
        n = max(1, -(-len(self.data) // self.mss))
        lens = np.full(n, self.mss, dtype=np.int64)
        lens[-1] = len(self.data) - self.mss * (n - 1)
        self.lens = lens
        self.ready = np.full(n, self.t_send, dtype=np.int64)
        self.path = [self.origin]

    @property
    def npkts(self) -> int:
        return len(self.lens)

    def chunks(self) -> Iterator[tuple[bytes, int]]:
        for i, arrival in enumerate(self.ready.tolist()):
            yield self.data[i * self.mss : (i + 1) * self.mss], arrival


@dataclass
class Leg:
    """One message delivered end to end on a stream."""

    train_id: int
    kind: str
    round: int
    src: str
    dst: str
    send_start: int
    send_end: int
    recv_start: int
    recv_end: int
    path: list
    npkts: int
    nbytes: int
    wire_bytes: int

    @property
    def duration(self) -> int:
        return self.recv_end - self.send_start


class TrafficLog:
    """Append-only per-train, per-node record stream."""

    def __init__(self) -> None:
        self.records: list[dict] = []

    def append(self, **rec: Any) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)


def _active_sid(pkt: Any) -> Optional[str]:
    return str(pkt.outer.dst) if isinstance(pkt, Srv6Packet) else None


def _encap_overhead(pkt: Any) -> int:
    return pkt.encap_overhead if isinstance(pkt, Srv6Packet) else 0


class Connection:
    """Reliable in-order byte stream endpoint.

    ``local`` may be a spoofed identity (a transparently intercepted stream
    answers as the original destination).
    """

    def __init__(self, node: "Node", local: tuple[Address, int], remote: tuple[Address, int],
                 intercepted: bool = False):
        self.node = node
        self.local = local
        self.remote = remote
        self.intercepted = intercepted
        self.handler: Any = None
        self.tx_seq = 0
        self.rx_bytes = 0

    @property
    def flow(self) -> FiveTuple:
        """5-tuple of packets this endpoint sends."""
        return FiveTuple(6, self.local[0], self.remote[0], self.local[1], self.remote[1])

    @property
    def inbound_flow(self) -> FiveTuple:
        return self.flow.reversed()

    def send(self, data: bytes, **meta: Any) -> Train:
        return self.node.send(self, data, meta)

    def __repr__(self) -> str:
        return (f"Connection({self.node.id} {self.local[0]}:{self.local[1]} <-> "
                f"{self.remote[0]}:{self.remote[1]})")


class Node:
    def __init__(self, net: "Network", spec: NodeSpec):
        self.net = net
        self.spec = spec
        self.id = spec.id
        self.address = spec.address
        self.sid = spec.sid
        self.roles = spec.roles
        self.sr_policies: list[SrPolicy] = []
        self.return_table: Optional[flows.FlowTable] = (
            flows.FlowTable(owner=spec.id) if "sr_endpoint" in spec.roles else None
        )
        self.proxy_table: Optional[flows.FlowTable] = None
        # (dir, train id, FlowValue) per proxy ingress store / egress encap
        self.proxy_trace: list[tuple[str, int, flows.FlowValue]] = []
        self.tproxy: Any = None  # object with .rule.matches(pkt) and .accept(conn)
        self.listeners: dict[int, Callable[[Connection], None]] = {}
        self.connections: dict[tuple, Connection] = {}
        self._ports = itertools.count(40001)

    def __repr__(self) -> str:
        return f"Node({self.id})"

    # -- sockets -------------------------------------------------------------

    def listen(self, port: int, accept: Callable[[Connection], None]) -> None:
        self.listeners[port] = accept

    def connect(self, remote: Address, port: int, handler: Any) -> Connection:
        conn = Connection(self, (self.address, next(self._ports)), (remote, port))
        conn.handler = handler
        self.connections[(conn.local, conn.remote)] = conn
        return conn

    def send(self, conn: Connection, data: bytes, meta: dict) -> Train:
        net = self.net
        now = net.sim.now
        mss = net.mss_from(self.id)
        head = InnerPacket.make(conn.local[0], conn.remote[0], conn.local[1], conn.remote[1],
                                seq=conn.tx_seq)
        conn.tx_seq += len(data)
        train = Train(next(net.train_ids), self.id, head, data, mss, now, meta)
        net.log.append(t=now, node=self.id, pkt=train.id, dir="tx", sid=None,
                       kind=meta.get("kind"), round=meta.get("round"), npkts=train.npkts,
                       bytes=len(data))
        self._egress(train)
        return train

    # -- packet path -----------------------------------------------------------

    def receive(self, train: Train) -> None:
        net = self.net
        now = net.sim.now
        pkt = train.head
        train.path.append(self.id)
        net.log.append(t=now, node=self.id, pkt=train.id, dir="rx", sid=_active_sid(pkt),
                       kind=train.meta.get("kind"), round=train.meta.get("round"),
                       npkts=train.npkts, bytes=train.hop_bytes[-1],
                       encap=_encap_overhead(pkt))
        if isinstance(pkt, Srv6Packet):
            if self.sid is not None and pkt.outer.dst == self.sid:
                self._endpoint(train, pkt)
            else:
                self._route(train, pkt.outer.dst)
        else:
            self._plain(train)

    def _endpoint(self, train: Train, pkt: Srv6Packet) -> None:
        now = self.net.sim.now
        if self.proxy_table is not None:
            inner = flows.ingress_decap(pkt, self.sid, self.proxy_table, now)
            self.proxy_trace.append(("ingress", train.id,
                                     self.proxy_table.get(five_tuple_of(inner), now)))
            train.head = inner
            self._plain(train)
            return
        action = process_endpoint(pkt, self.sid)
        if isinstance(action, Forward):
            train.head = action.packet
            self._route(train, action.packet.outer.dst)
        elif isinstance(action, DecapForward):
            if self.return_table is not None:
                self.return_table.put(five_tuple_of(action.inner),
                                      flows.FlowValue(action.outer, action.srh), now)
            train.head = action.inner
            self._plain(train)

    def _plain(self, train: Train) -> None:
        inner: InnerPacket = train.head
        if inner.header.dst == self.address:
            self._deliver(train, intercepted=False)
            return
        if self.tproxy is not None and self.tproxy.rule.matches(inner):
            self._deliver(train, intercepted=True)
            return
        for policy in self.sr_policies:
            if policy.matches(inner):
                train.head = encapsulate(inner, policy.traversal, self.address)
                self._route(train, train.head.outer.dst)
                return
        if self.return_table is not None and len(self.return_table):
            stored = self.return_table.get(five_tuple_of(inner).reversed(), self.net.sim.now)
            if stored is not None:
                srh = reverse_srh(stored.srh, self.sid, stored.outer.src)
                train.head = Srv6Packet(outer_header_for(self.address, srh, inner), srh, inner)
                self._route(train, srh.active_sid)
                return
        self._egress(train)

    def _egress(self, train: Train) -> None:
        """Egress hook (SFC-proxy re-encapsulation) followed by routing."""
        if self.proxy_table is not None and isinstance(train.head, InnerPacket):
            res = flows.egress_encap(train.head, self.proxy_table, self.net.sim.now)
            if isinstance(res, Srv6Packet):
                self.proxy_trace.append(("egress", train.id, flows.FlowValue(res.outer, res.srh)))
                train.head = res
            else:
                log.debug("%s: no flow entry for %s, passing through", self.id,
                          five_tuple_of(train.head))
        pkt = train.head
        self._route(train, pkt.outer.dst if isinstance(pkt, Srv6Packet) else pkt.header.dst)

    def _route(self, train: Train, dst: Address) -> None:
        net = self.net
        nh = net.route_next_hop(self.id, dst)
        link = net.links[(self.id, nh)]
        if int(train.lens.max()) + IPV6_HEADER_LEN > link.mtu:
            raise RoutingError(f"segment exceeds mtu {link.mtu} on {self.id}->{nh}")
        sizes = train.lens + (PACKET_HEADERS + _encap_overhead(train.head))
        train.ready = link.transmit_train(train.ready, sizes)
        if train.send_end is None:
            train.send_end = link.free_at
        train.hop_bytes.append(int(sizes.sum()))
        net.sim.schedule(int(train.ready[0]), net.nodes[nh].receive, train,
                         label=f"rx {nh} train {train.id}")

    def _deliver(self, train: Train, intercepted: bool) -> None:
        inner: InnerPacket = train.head
        local = (inner.header.dst, inner.dst_port)
        remote = (inner.header.src, inner.src_port)
        conn = self.connections.get((local, remote))
        if conn is None:
            accept = self.tproxy.accept if intercepted else self.listeners.get(inner.dst_port)
            if accept is None:
                log.warning("%s: no listener for %s; dropping train %d", self.id,
                            five_tuple_of(inner), train.id)
                self.net.dropped.append(train.id)
                return
            conn = Connection(self, local, remote, intercepted)
            self.connections[(local, remote)] = conn
            accept(conn)
        leg = self.net.complete_leg(train, self.id)
        conn.rx_bytes += len(train.data)
        conn.handler.on_data(conn, train, leg)


class Network:
    def __init__(self, topo: TopologyConfig, sim: Optional[Simulator] = None):
        topo.validate()
        self.topo = topo
        self.sim = sim or Simulator()
        self.nodes: dict[str, Node] = {n.id: Node(self, n) for n in topo.nodes}
        self.by_addr: dict[Address, str] = {n.address: n.id for n in topo.nodes}
        for n in topo.nodes:
            if n.sid is not None:
                self.by_addr.setdefault(n.sid, n.id)
        self.links: dict[tuple[str, str], LinkDirection] = {}
        for spec in topo.links:
            self.links[(spec.u, spec.v)] = LinkDirection(spec, spec.u, spec.v)
            self.links[(spec.v, spec.u)] = LinkDirection(spec, spec.v, spec.u)
        self.adj = topo.adjacency()
        self._next_hops: dict[str, dict[str, str]] = {}
        self.log = TrafficLog()
        self.legs: list[Leg] = []
        self.leg_listeners: list[Callable[[Leg], None]] = []
        self.dropped: list[int] = []
        self.train_ids = itertools.count(1)
        for s in topo.schedules:
            self.set_link_bandwidth(s.link, s.bw_bps, s.at_ns, s.restore_ns)

    def node(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def node_by_addr(self, addr: Address) -> Node:
        return self.nodes[self.by_addr[addr]]

    def mss_from(self, node_id: str) -> int:
        mtu = min(self.links[(node_id, nb)].mtu for nb in self.adj[node_id])
        return mtu - IPV6_HEADER_LEN

    def route_next_hop(self, node_id: str, dst: Address) -> str:
        dst_id = self.by_addr.get(dst)
        if dst_id is None:
            raise RoutingError(f"no node owns address {dst}")
        if dst_id == node_id:
            raise RoutingError(f"{node_id}: packet for itself reached routing")
        table = self._next_hops.get(dst_id)
        if table is None:
            table = self._next_hops[dst_id] = bfs_next_hops(self.adj, dst_id)
        try:
            return table[node_id]
        except KeyError:
            raise RoutingError(f"{dst} unreachable from {node_id}") from None

    def path(self, src: str, dst: str) -> list[str]:
        hops = [src]
        while hops[-1] != dst:
            hops.append(self.route_next_hop(hops[-1], self.nodes[dst].address))
        return hops

    def link(self, u: str, v: str) -> LinkDirection:
        try:
            return self.links[(u, v)]
        except KeyError:
            raise ConfigError(f"unknown link {u}-{v}") from None

    def set_link_bandwidth(self, link: tuple[str, str], bw_bps: int, at_ns: int,
                           restore_ns: Optional[int] = None) -> None:
        """Schedule a capacity change on both directions of ``link``."""
        u, v = link
        for d in (self.link(u, v), self.link(v, u)):
            d.set_bandwidth(bw_bps, at_ns, restore_ns)

    def measure_throughput(self, link: tuple[str, str], window_ns: int,
                           t: Optional[int] = None) -> float:
        """Configured capacity averaged over the trailing window (bits/s)."""
        if window_ns <= 0:
            raise ValueError("window must be positive")
        t = self.sim.now if t is None else t
        return self.link(*link).capacity_avg(max(0, t - window_ns), t)

    def complete_leg(self, train: Train, dst: str) -> Leg:
        leg = Leg(
            train_id=train.id,
            kind=train.meta.get("kind", ""),
            round=train.meta.get("round", -1),
            src=train.origin,
            dst=dst,
            send_start=train.t_send,
            send_end=train.send_end if train.send_end is not None else train.t_send,
            recv_start=int(train.ready[0]),
            recv_end=int(train.ready[-1]),
            path=list(train.path),
            npkts=train.npkts,
            nbytes=len(train.data),
            wire_bytes=sum(train.hop_bytes),
        )
        self.legs.append(leg)
        for cb in self.leg_listeners:
            cb(leg)
        return leg

    def run_until(self, t: int) -> None:
        self.sim.run_until(t)

    def flow_tables(self) -> dict[str, dict]:
        out = {}
        for nid in sorted(self.nodes, key=natural_key):
            node = self.nodes[nid]
            if node.proxy_table is not None:
                out[f"{nid}/sfc_proxy"] = node.proxy_table.to_json()
            if node.return_table is not None and len(node.return_table):
                out[f"{nid}/return"] = node.return_table.to_json()
        return out


def build_topology(topo: TopologyConfig, sim: Optional[Simulator] = None) -> Network:
    return Network(topo, sim)
