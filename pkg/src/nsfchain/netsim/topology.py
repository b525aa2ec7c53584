"""Topology specs, JSON config parsing and the ten-node preset."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from ..srv6 import Address, sid

ROLES = frozenset({"client", "sr_source", "transit", "sr_endpoint", "nsf", "server"})
DEFAULT_BW_MBPS = 1000.0
DEFAULT_DELAY_US = 50.0
DEFAULT_MTU = 9000


class ConfigError(ValueError):
    pass


class DisconnectedGraph(ConfigError):
    pass


def natural_key(node_id: str) -> tuple:
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", node_id))


@dataclass(frozen=True)
class Resources:
    c_com: float = 1.0
    c_mem: int = 16 << 30
    c_sto: int = 256 << 30


@dataclass(frozen=True)
class NodeSpec:
    id: str
    address: Address
    roles: frozenset
    sid: Optional[Address] = None
    resources: Resources = Resources()


@dataclass(frozen=True)
class LinkSpec:
    u: str
    v: str
    bw_bps: int = int(DEFAULT_BW_MBPS * 1e6)
    delay_ns: int = int(DEFAULT_DELAY_US * 1e3)
    mtu: int = DEFAULT_MTU

    @property
    def key(self) -> tuple[str, str]:
        return tuple(sorted((self.u, self.v), key=natural_key))  # type: ignore[return-value]


@dataclass(frozen=True)
class ScheduleSpec:
    link: tuple[str, str]
    bw_bps: int
    at_ns: int
    restore_ns: Optional[int] = None


@dataclass
class TopologyConfig:
    nodes: list[NodeSpec]
    links: list[LinkSpec]
    schedules: list[ScheduleSpec] = field(default_factory=list)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ConfigError(f"unknown node {node_id!r}")

    def with_roles(self, role: str) -> list[NodeSpec]:
        return [n for n in self.nodes if role in n.roles]

    def without_links(self, *pairs: tuple[str, str]) -> "TopologyConfig":
        drop = {tuple(sorted(p, key=natural_key)) for p in pairs}
        return TopologyConfig(self.nodes, [l for l in self.links if l.key not in drop],
                              list(self.schedules))

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for l in self.links:
            adj[l.u].append(l.v)
            adj[l.v].append(l.u)
        for k in adj:
            adj[k].sort(key=natural_key)
        return adj

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate node ids: {sorted({i for i in ids if ids.count(i) > 1})}")
        addrs = [n.address for n in self.nodes]
        if len(set(addrs)) != len(addrs):
            raise ConfigError("duplicate node addresses")
        for n in self.nodes:
            bad = set(n.roles) - ROLES
            if bad:
                raise ConfigError(f"node {n.id}: unknown roles {sorted(bad)}")
            if "nsf" in n.roles and n.sid is None:
                raise ConfigError(f"node {n.id}: nsf role requires a sid")
        for role in ("client", "server"):
            count = len(self.with_roles(role))
            if count != 1:
                raise ConfigError(f"exactly one {role} required, found {count}")
        seen = set()
        for l in self.links:
            for end in (l.u, l.v):
                if end not in ids:
                    raise ConfigError(f"link {l.u}-{l.v} references unknown node {end}")
            if l.u == l.v:
                raise ConfigError(f"self-loop on {l.u}")
            if l.key in seen:
                raise ConfigError(f"duplicate link {l.key}")
            seen.add(l.key)
            if l.bw_bps <= 0:
                raise ConfigError(f"link {l.key}: bandwidth must be positive")
            if l.mtu < 1280:
                raise ConfigError(f"link {l.key}: mtu must be >= 1280")
        for s in self.schedules:
            if tuple(sorted(s.link, key=natural_key)) not in seen:
                raise ConfigError(f"schedule references unknown link {s.link}")
            if s.bw_bps <= 0:
                raise ConfigError("scheduled bandwidth must be positive")
        self.check_connected()

    def check_connected(self) -> None:
        adj = self.adjacency()
        start = self.nodes[0].id
        seen = {start}
        todo = deque([start])
        while todo:
            for nb in adj[todo.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        missing = sorted(set(adj) - seen, key=natural_key)
        if missing:
            raise DisconnectedGraph(f"nodes unreachable from {start}: {missing}")

    def to_json(self) -> dict[str, Any]:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "address": str(n.address),
                    "roles": sorted(n.roles),
                    "sid": None if n.sid is None else str(n.sid),
                    "resources": {"c_com": n.resources.c_com, "c_mem": n.resources.c_mem,
                                  "c_sto": n.resources.c_sto},
                }
                for n in self.nodes
            ],
            "links": [
                {"u": l.u, "v": l.v, "bw_mbps": l.bw_bps / 1e6, "delay_us": l.delay_ns / 1e3,
                 "mtu": l.mtu}
                for l in self.links
            ],
            "schedules": [
                {"link": list(s.link), "bw_mbps": s.bw_bps / 1e6, "at_s": s.at_ns / 1e9,
                 "restore_s": None if s.restore_ns is None else s.restore_ns / 1e9}
                for s in self.schedules
            ],
        }


def _mbps(v: Any) -> int:
    return int(round(float(v) * 1e6))


def parse_schedule(d: dict) -> ScheduleSpec:
    try:
        link = tuple(d["link"])
        if len(link) != 2:
            raise ConfigError(f"schedule link must name two nodes: {d['link']}")
        restore = d.get("restore_s")
        return ScheduleSpec(link, _mbps(d["bw_mbps"]), int(round(float(d["at_s"]) * 1e9)),
                            None if restore is None else int(round(float(restore) * 1e9)))
    except KeyError as exc:
        raise ConfigError(f"schedule missing field {exc}") from None


def parse_topology(data: dict) -> TopologyConfig:
    try:
        nodes = []
        for n in data["nodes"]:
            addr = sid(n["address"])
            res = n.get("resources", {})
            nodes.append(NodeSpec(
                id=n["id"],
                address=addr,
                roles=frozenset(n.get("roles", ["transit"])),
                sid=None if n.get("sid") is None else sid(n["sid"]),
                resources=Resources(float(res.get("c_com", 1.0)),
                                    int(res.get("c_mem", 16 << 30)),
                                    int(res.get("c_sto", 256 << 30))),
            ))
        links = [
            LinkSpec(l["u"], l["v"], _mbps(l.get("bw_mbps", DEFAULT_BW_MBPS)),
                     int(round(float(l.get("delay_us", DEFAULT_DELAY_US)) * 1e3)),
                     int(l.get("mtu", DEFAULT_MTU)))
            for l in data["links"]
        ]
        schedules = [parse_schedule(s) for s in data.get("schedules", [])]
    except KeyError as exc:
        raise ConfigError(f"topology missing field {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    topo = TopologyConfig(nodes, links, schedules)
    topo.validate()
    return topo


def load_topology(path: str) -> TopologyConfig:
    with open(path) as fh:
        return parse_topology(json.load(fh))


TEN_NODE_ROLES = {
    "v1": ["client"],
    "v2": ["sr_source"],
    "v3": ["transit"],
    "v4": ["transit"],
    "v5": ["sr_endpoint"],
    "v6": ["nsf"],
    "v7": ["nsf"],
    "v8": ["server"],
    "v9": ["sr_endpoint"],
    "v10": ["sr_endpoint"],
}

TEN_NODE_LINKS = [
    ("v1", "v2"), ("v2", "v3"), ("v3", "v6"), ("v3", "v4"), ("v4", "v7"),
    ("v4", "v5"), ("v5", "v8"), ("v3", "v9"), ("v9", "v10"), ("v10", "v4"),
]


def node_address(node_id: str) -> Address:
    return sid(f"2001:db8::{int(node_id[1:]):x}")


def ten_node_topology(bw_mbps: float = DEFAULT_BW_MBPS, delay_us: float = DEFAULT_DELAY_US,
                  mtu: int = DEFAULT_MTU) -> TopologyConfig:
    """Ten-node evaluation topology.

    The primary service path is v1-v2-v3-v6-v3-v4-v7-v4-v5-v8; v9-v10 offer
    a detour around (v3, v4).
    """
    nodes = []
    for nid, roles in TEN_NODE_ROLES.items():
        addr = node_address(nid)
        has_sid = bool({"nsf", "sr_endpoint", "sr_source"} & set(roles))
        nodes.append(NodeSpec(nid, addr, frozenset(roles), addr if has_sid else None))
    links = [LinkSpec(u, v, _mbps(bw_mbps), int(round(delay_us * 1e3)), mtu)
             for u, v in TEN_NODE_LINKS]
    topo = TopologyConfig(nodes, links)
    topo.validate()
    return topo


def bfs_next_hops(adj: dict[str, list[str]], dst: str) -> dict[str, str]:
    """Next hop toward ``dst`` from every node: fewest hops, lowest-id tie-break."""
    dist = {dst: 0}
    todo = deque([dst])
    while todo:
        cur = todo.popleft()
        for nb in adj[cur]:
            if nb not in dist:
                dist[nb] = dist[cur] + 1
                todo.append(nb)
    hops = {}
    for node, d in dist.items():
        if node == dst:
            continue
        hops[node] = min((nb for nb in adj[node] if dist.get(nb) == d - 1), key=natural_key)
    return hops


def shortest_path(adj: dict[str, list[str]], src: str, dst: str) -> list[str]:
    hops = bfs_next_hops(adj, dst)
    path = [src]
    while path[-1] != dst:
        if path[-1] not in hops:
            raise DisconnectedGraph(f"{dst} unreachable from {src}")
        path.append(hops[path[-1]])
    return path


def links_on(path: Iterable[str]) -> list[tuple[str, str]]:
    p = list(path)
    return list(zip(p, p[1:]))
