"""Endpoint behaviour: the client (F^1), neural service functions and the
target server (F^K).

Every handler runs inside the event loop. Compute is instantaneous in
wall-clock terms; its emulated duration comes from :class:`ComputeModel`
and the outbound frame is released when that time has elapsed.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

import numpy as np

from . import flows
from . import nn
from .framing import (
    ACTIVATION,
    FLAG_REJECTED,
    GRADIENT,
    RESULT,
    FrameError,
    MessageFrame,
    ReassemblyBuffer,
)
from .netsim.engine import NS_PER_S
from .netsim.network import Connection, Leg, Network, Train
from .srv6 import Address, InnerPacket

log = logging.getLogger(__name__)

SERVICE_PORT = 9000
DEFAULT_TIMEOUT_NS = 60 * NS_PER_S


@dataclass(frozen=True)
class InterceptRule:
    """TPROXY analog: streams to (addr, port) are marked and redirected locally."""

    addr: Address
    port: int
    mark: int = 1
    redirect_port: int = SERVICE_PORT

    def matches(self, pkt: InnerPacket) -> bool:
        return pkt.header.dst == self.addr and pkt.dst_port == self.port


def intercept(pkt: InnerPacket, rule: InterceptRule) -> bool:
    return rule.matches(pkt)


@dataclass
class _TproxyHook:
    rule: InterceptRule
    accept: Callable[[Connection], None]


@dataclass(frozen=True)
class ComputeModel:
    """Emulated compute time: a constant floor plus FLOPs at the node's rate."""

    base_rate: float = 1e12  # FLOP/s at C_com = 1
    fwd_floor_ns: int = 500_000
    bwd_floor_ns: int = 500_000

    def _ns(self, flops: int, c_com: float) -> int:
        rate = c_com * self.base_rate
        return -(-flops * NS_PER_S // int(rate)) if flops else 0

    def forward_ns(self, flops: int, c_com: float = 1.0) -> int:
        return self.fwd_floor_ns + self._ns(flops, c_com)

    def backward_ns(self, flops: int, c_com: float = 1.0) -> int:
        return self.bwd_floor_ns + self._ns(flops, c_com)


@dataclass
class Span:
    round: int
    node: str
    phase: str  # "fwd" | "bwd"
    start: int
    end: int


@dataclass
class ClientRound:
    round: int
    epoch: int
    batch: int
    start: int
    end: Optional[int] = None
    status: str = "pending"
    rejected: bool = False
    output: Optional[np.ndarray] = None


class Recorder:
    """Collects compute spans, delivered legs and round outcomes."""

    def __init__(self, net: Network):
        self.spans: list[Span] = []
        self.legs: list[Leg] = []
        self.rounds: list[ClientRound] = []
        self.waits: list[tuple[int, str, int]] = []
        self.stats: dict[int, tuple[float, float]] = {}
        self.executions: Counter = Counter()
        self.rekeys: list[dict] = []
        net.leg_listeners.append(self.legs.append)

    def span(self, rnd: int, node: str, phase: str, start: int, dur: int) -> int:
        self.spans.append(Span(rnd, node, phase, start, start + dur))
        self.executions[(node, phase)] += 1
        return start + dur


class _StreamApp:
    """Shared reassembly: frames become events at their last byte's arrival."""

    def __init__(self, net: Network, node_id: str):
        self.net = net
        self.node = net.node(node_id)
        self.sim = net.sim
        self._buffers: dict[int, ReassemblyBuffer] = {}

    def on_data(self, conn: Connection, train: Train, leg: Leg) -> None:
        buf = self._buffers.setdefault(id(conn), ReassemblyBuffer())
        for chunk, arrival in train.chunks():
            for frame in buf.feed(chunk):
                self.sim.schedule(arrival, self.on_frame, conn, frame, leg,
                                  label=f"{self.node.id} frame r{frame.round}")

    def on_frame(self, conn: Connection, frame: MessageFrame, leg: Leg) -> None:
        raise NotImplementedError

    @property
    def c_com(self) -> float:
        return self.node.spec.resources.c_com


class ClientApp(_StreamApp):
    """Runs F^1 and drives rounds, one outstanding at a time."""

    def __init__(self, net: Network, node_id: str, sub: nn.SubModel,
                 target: tuple[Address, int], batches: Iterator[tuple[int, np.ndarray, Any]],
                 recorder: Recorder, compute: ComputeModel, training: bool,
                 train_cfg: Optional[nn.TrainConfig] = None,
                 timeout_ns: int = DEFAULT_TIMEOUT_NS, stop_at: Optional[int] = None):
        super().__init__(net, node_id)
        self.sub = sub
        self.target = target
        self.batches = batches
        self.rec = recorder
        self.compute = compute
        self.training = training
        self.train_cfg = train_cfg or nn.TrainConfig()
        self.opt = nn.OptimizerState.zeros_like(sub.layers) if training else None
        self.timeout_ns = timeout_ns
        self.stop_at = stop_at
        self.conn: Optional[Connection] = None
        self.current: Optional[ClientRound] = None
        self.done = False
        self.failed = False
        self._act_train: Optional[Train] = None
        self._next_round = 1

    def start(self, at: int = 0) -> None:
        self.sim.schedule(at, self._begin, label="client start")

    def _begin(self) -> None:
        now = self.sim.now
        if self.stop_at is not None and now >= self.stop_at:
            self.done = True
            return
        item = next(self.batches, None)
        if item is None:
            self.done = True
            return
        epoch, x, y = item
        rnd = self._next_round
        self._next_round += 1
        self.current = ClientRound(rnd, epoch, len(x), now)
        self.rec.rounds.append(self.current)
        out = nn.forward(self.sub, x)
        if not self.training:
            self.sub._inputs = self.sub._preacts = None
        dur = self.compute.forward_ns(nn.forward_flops(self.sub, len(x)), self.c_com)
        end = self.rec.span(rnd, self.node.id, "fwd", now, dur)
        labels = np.asarray(y) if self.training else None
        frame = MessageFrame(ACTIVATION, rnd, epoch, out, labels)
        self.sim.schedule(end, self._send, frame, label=f"client send r{rnd}")
        self.sim.schedule(now + self.timeout_ns, self._check_timeout, rnd, label="client timeout")

    def _send(self, frame: MessageFrame) -> None:
        if self.conn is None:
            self.conn = self.node.connect(self.target[0], self.target[1], self)
        self._act_train = self.conn.send(frame.encode(), kind="act", round=frame.round)

    def _check_timeout(self, rnd: int) -> None:
        cur = self.current
        if cur is not None and cur.round == rnd and cur.end is None:
            log.warning("round %d timed out at t=%d", rnd, self.sim.now)
            cur.status = "timeout"
            cur.end = self.sim.now
            self.done = self.failed = True

    def on_frame(self, conn: Connection, frame: MessageFrame, leg: Leg) -> None:
        cur = self.current
        if cur is None or frame.round != cur.round or cur.end is not None:
            raise FrameError(f"client: unexpected frame for round {frame.round}")
        now = self.sim.now
        if frame.kind == RESULT:
            cur.rejected = frame.rejected
            cur.output = frame.data
            if self.training:
                self.sub._inputs = self.sub._preacts = None
            self._finish(now, "rejected" if frame.rejected else "ok")
        elif frame.kind == GRADIENT and self.training:
            self.rec.waits.append((cur.round, self.node.id,
                                   leg.recv_start - self._act_train.send_end))
            _, grads = nn.backward(self.sub, frame.data)
            nn.sgd_step(self.sub, grads, self.opt, self.train_cfg, cur.epoch)
            dur = self.compute.backward_ns(nn.backward_flops(self.sub, cur.batch), self.c_com)
            end = self.rec.span(cur.round, self.node.id, "bwd", now, dur)
            self.sim.schedule(end, self._finish, end, "ok", label=f"client done r{cur.round}")
        else:
            raise FrameError(f"client: unexpected {frame.kind_name} frame")

    def _finish(self, t: int, status: str) -> None:
        cur = self.current
        cur.end = t
        cur.status = status
        self.sim.schedule(t, self._begin, label="client next round")


class NsfApp(_StreamApp):
    """Intermediate sub-model F^k behind a transparent (or explicit) listener."""

    def __init__(self, net: Network, node_id: str, sub: nn.SubModel,
                 next_target: tuple[Address, int], recorder: Recorder,
                 compute: ComputeModel, training: bool,
                 train_cfg: Optional[nn.TrainConfig] = None,
                 rule: Optional[InterceptRule] = None, sfc_proxy: bool = False):
        super().__init__(net, node_id)
        self.sub = sub
        self.next_target = next_target
        self.rec = recorder
        self.compute = compute
        self.training = training
        self.train_cfg = train_cfg or nn.TrainConfig()
        self.opt = nn.OptimizerState.zeros_like(sub.layers) if training else None
        self.upstream: Optional[Connection] = None
        self.downstream: Optional[Connection] = None
        self.awaiting: Optional[MessageFrame] = None  # activation awaiting its return
        self._act_train: Optional[Train] = None
        self._return_rekeyed = False
        if sfc_proxy:
            self.node.proxy_table = flows.FlowTable(owner=node_id)
        if rule is not None:
            self.node.tproxy = _TproxyHook(rule, self._accept)
        else:
            self.node.listen(SERVICE_PORT, self._accept)

    def _accept(self, conn: Connection) -> None:
        if self.upstream is not None:
            raise FrameError(f"{self.node.id}: second upstream stream {conn}")
        conn.handler = self
        self.upstream = conn

    def on_frame(self, conn: Connection, frame: MessageFrame, leg: Leg) -> None:
        if conn is self.upstream:
            self._on_activation(frame)
        elif conn is self.downstream:
            self._on_return(frame, leg)
        else:
            raise FrameError(f"{self.node.id}: frame on unknown stream")

    def _on_activation(self, frame: MessageFrame) -> None:
        if frame.kind != ACTIVATION:
            raise FrameError(f"{self.node.id}: expected activation, got {frame.kind_name}")
        if self.awaiting is not None:
            raise FrameError(f"{self.node.id}: activation r{frame.round} while r"
                             f"{self.awaiting.round} is outstanding")
        now = self.sim.now
        out = nn.forward(self.sub, frame.data)
        if not self.training:
            self.sub._inputs = self.sub._preacts = None
        dur = self.compute.forward_ns(nn.forward_flops(self.sub, len(out)), self.c_com)
        end = self.rec.span(frame.round, self.node.id, "fwd", now, dur)
        self.awaiting = frame
        nxt = MessageFrame(ACTIVATION, frame.round, frame.epoch, out, frame.labels)
        self.sim.schedule(end, self._send_down, nxt, label=f"{self.node.id} send r{frame.round}")

    def _send_down(self, frame: MessageFrame) -> None:
        if self.downstream is None:
            self.downstream = self.node.connect(self.next_target[0], self.next_target[1], self)
            table = self.node.proxy_table
            if table is not None:
                old, new = self.upstream.inbound_flow, self.downstream.flow
                flows.rekey(table, old, new, self.sim.now)
                self.rec.rekeys.append({"t": self.sim.now, "node": self.node.id,
                                        "old": str(old), "new": str(new)})
        self._act_train = self.downstream.send(frame.encode(), kind="act", round=frame.round)

    def _on_return(self, frame: MessageFrame, leg: Leg) -> None:
        pending = self.awaiting
        if pending is None or frame.round != pending.round:
            raise FrameError(f"{self.node.id}: {frame.kind_name} for unknown round {frame.round}")
        now = self.sim.now
        if frame.kind == RESULT:
            self.awaiting = None
            if self.training:
                self.sub._inputs = self.sub._preacts = None
            self._send_up(frame)
            return
        if frame.kind != GRADIENT or not self.training:
            raise FrameError(f"{self.node.id}: unexpected {frame.kind_name} frame")
        self.rec.waits.append((frame.round, self.node.id,
                               leg.recv_start - self._act_train.send_end))
        g, grads = nn.backward(self.sub, frame.data)
        nn.sgd_step(self.sub, grads, self.opt, self.train_cfg, pending.epoch)
        dur = self.compute.backward_ns(nn.backward_flops(self.sub, len(g)), self.c_com)
        end = self.rec.span(frame.round, self.node.id, "bwd", now, dur)
        self.awaiting = None
        up = MessageFrame(GRADIENT, frame.round, frame.epoch, g)
        self.sim.schedule(end, self._send_up, up, label=f"{self.node.id} grad r{frame.round}")

    def _send_up(self, frame: MessageFrame) -> None:
        table = self.node.proxy_table
        if table is not None and not self._return_rekeyed:
            old, new = self.downstream.inbound_flow, self.upstream.flow
            flows.rekey(table, old, new, self.sim.now)
            self.rec.rekeys.append({"t": self.sim.now, "node": self.node.id,
                                    "old": str(old), "new": str(new)})
            self._return_rekeyed = True
        kind = "grad" if frame.kind == GRADIENT else "result"
        self.upstream.send(frame.encode(), kind=kind, round=frame.round)


class ServerApp(_StreamApp):
    """Target server running F^K; answers with results or gradients."""

    def __init__(self, net: Network, node_id: str, sub: nn.SubModel, recorder: Recorder,
                 compute: ComputeModel, training: bool,
                 train_cfg: Optional[nn.TrainConfig] = None, port: int = SERVICE_PORT):
        super().__init__(net, node_id)
        self.sub = sub
        self.rec = recorder
        self.compute = compute
        self.training = training
        self.train_cfg = train_cfg or nn.TrainConfig()
        self.opt = nn.OptimizerState.zeros_like(sub.layers) if training else None
        self._rejected = 0
        self.node.listen(port, self._accept)

    def _accept(self, conn: Connection) -> None:
        conn.handler = self

    def on_frame(self, conn: Connection, frame: MessageFrame, leg: Leg) -> None:
        if frame.kind != ACTIVATION:
            raise FrameError(f"server: unexpected {frame.kind_name} frame")
        now = self.sim.now
        x = frame.data
        b = x.shape[0]
        if x.ndim != 2 or x.shape[1] != self.sub.in_dim:
            # the chain was bypassed: activations skipped intermediate sub-models
            (log.debug if self._rejected else log.warning)(
                "server: round %d input %s does not fit F%d; rejecting",
                frame.round, list(x.shape), self.sub.k)
            self._rejected += 1
            reply = MessageFrame(RESULT, frame.round, frame.epoch,
                                 np.zeros((b, 0), dtype=x.dtype), flags=FLAG_REJECTED)
            conn.send(reply.encode(), kind="result", round=frame.round)
            return
        logits = nn.forward(self.sub, x)
        fwd = self.compute.forward_ns(nn.forward_flops(self.sub, b), self.c_com)
        t = self.rec.span(frame.round, self.node.id, "fwd", now, fwd)
        if not self.training:
            self.sub._inputs = self.sub._preacts = None
            reply = MessageFrame(RESULT, frame.round, frame.epoch, logits)
            self.sim.schedule(t, self._reply, conn, reply, "result")
            return
        if frame.labels is None:
            raise FrameError("server: training activation without labels")
        loss, dlogits = nn.loss_and_grad(logits, frame.labels)
        if not np.isfinite(loss):
            raise nn.ModelError(f"loss diverged in round {frame.round}")
        self.rec.stats[frame.round] = (loss, nn.accuracy(logits, frame.labels))
        g, grads = nn.backward(self.sub, dlogits)
        nn.sgd_step(self.sub, grads, self.opt, self.train_cfg, frame.epoch)
        bwd = self.compute.backward_ns(nn.backward_flops(self.sub, b), self.c_com)
        t = self.rec.span(frame.round, self.node.id, "bwd", t, bwd)
        reply = MessageFrame(GRADIENT, frame.round, frame.epoch, g)
        self.sim.schedule(t, self._reply, conn, reply, "grad")

    def _reply(self, conn: Connection, frame: MessageFrame, kind: str) -> None:
        conn.send(frame.encode(), kind=kind, round=frame.round)
