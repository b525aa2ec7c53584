"""Link monitor that swaps the SR source's segment list onto a detour."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .netsim.engine import NS_PER_S
from .netsim.network import Network, SrPolicy
from .srv6 import Address, format_traversal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonitorConfig:
    link: tuple[str, str]
    threshold_bps: float
    interval_ns: int = NS_PER_S
    window_ns: int = 10 * NS_PER_S

    def __post_init__(self) -> None:
        if self.interval_ns <= 0:
            raise ValueError("interval must be positive")
        if self.window_ns < self.interval_ns:
            raise ValueError("window must be at least one interval")

    @property
    def history_len(self) -> int:
        return self.window_ns // self.interval_ns


@dataclass(frozen=True)
class PathPolicy:
    primary: tuple[Address, ...]
    detour: tuple[Address, ...]
    trigger_link: tuple[str, str]

    def check_chain(self, nsf_sids: Sequence[Address]) -> None:
        """Both lists must visit the NSF SIDs in chain order and share the last segment."""
        for name, lst in (("primary", self.primary), ("detour", self.detour)):
            seen = [s for s in lst if s in nsf_sids]
            if seen != list(nsf_sids):
                raise ValueError(f"{name} list does not visit the chain in order")
        if self.primary[-1] != self.detour[-1]:
            raise ValueError("primary and detour lists end at different segments")


@dataclass
class ReconfigEvent:
    t: int
    old: tuple[Address, ...]
    new: tuple[Address, ...]
    link: tuple[str, str]
    samples: list[float]

    def to_json(self) -> dict:
        return {"t_ns": self.t, "old": format_traversal(self.old),
                "new": format_traversal(self.new), "trigger_link": list(self.link),
                "trigger_samples_bps": list(self.samples)}


def detect_congestion(history: Sequence[float], threshold: float, full: int) -> bool:
    """Every sample in a full window at or below ``threshold``.

    The comparison is inclusive: a link capped exactly at the threshold
    counts as congested.
    """
    return len(history) >= full and all(s <= threshold for s in history)


class Controller:
    def __init__(self, net: Network, monitor: MonitorConfig, policy: PathPolicy,
                 sr_source: str, revert: bool = False):
        self.net = net
        self.monitor = monitor
        self.policy = policy
        self.source = net.node(sr_source)
        self.revert = revert
        self.history: deque[float] = deque(maxlen=monitor.history_len)
        self.events: list[ReconfigEvent] = []
        self.on_detour = False
        self._running = False

    def start(self) -> None:
        self._running = True
        self.net.sim.schedule(self.net.sim.now + self.monitor.interval_ns, self._tick,
                              label="controller poll")

    def stop(self) -> None:
        self._running = False

    def _tick(self) -> None:
        if not self._running:
            return
        self.poll(self.net.sim.now)
        if detect_congestion(self.history, self.monitor.threshold_bps,
                             self.monitor.history_len):
            self.reconfigure()
        elif (self.revert and self.on_detour and len(self.history) == self.history.maxlen
              and all(s > self.monitor.threshold_bps for s in self.history)):
            self._switch(self.policy.detour, self.policy.primary)
            self.on_detour = False
        self.net.sim.after(self.monitor.interval_ns, self._tick, label="controller poll")

    def poll(self, t: Optional[int] = None) -> tuple[tuple[str, str], float]:
        t = self.net.sim.now if t is None else t
        sample = self.net.measure_throughput(self.monitor.link, self.monitor.interval_ns, t)
        self.history.append(sample)
        return self.monitor.link, sample

    def _policy(self, traversal: tuple[Address, ...]) -> Optional[SrPolicy]:
        for p in self.source.sr_policies:
            if tuple(p.traversal) == traversal:
                return p
        return None

    def _switch(self, old: tuple[Address, ...], new: tuple[Address, ...]) -> bool:
        pol = self._policy(old)
        if pol is None:
            return False
        pol.traversal = list(new)
        ev = ReconfigEvent(self.net.sim.now, old, new, self.policy.trigger_link,
                           list(self.history))
        self.events.append(ev)
        log.info("t=%d: segment list %s -> %s", ev.t, format_traversal(old),
                 format_traversal(new))
        return True

    def reconfigure(self) -> bool:
        """Move new encapsulations onto the detour; a no-op once there."""
        if self.on_detour:
            log.debug("already on detour")
            return False
        if not self._switch(self.policy.primary, self.policy.detour):
            log.warning("no SR policy with the primary list on %s", self.source.id)
            return False
        self.on_detour = True
        return True
