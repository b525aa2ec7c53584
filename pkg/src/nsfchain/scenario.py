"""Scenario configuration (JSON) and wiring of a chain onto a network."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Optional

import numpy as np

from . import nn
from .controller import Controller, MonitorConfig, PathPolicy
from .netsim.engine import NS_PER_S, seconds_to_ns
from .netsim.network import Network, SrPolicy
from .netsim.topology import ConfigError, TopologyConfig, ten_node_topology, parse_topology
from .nsf import (
    SERVICE_PORT,
    ClientApp,
    ComputeModel,
    InterceptRule,
    NsfApp,
    Recorder,
    ServerApp,
)

DESK_DIMS = (384, 512, 256, 128, 10)
FULL_DIMS = (3072, 4096, 2048, 1024, 100)
MODES = ("inference", "training")
CHAININGS = ("sfc", "traditional", "transparent-no-srv6")
PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")


@dataclass(frozen=True)
class ModelSpec:
    dims: tuple = DESK_DIMS  # sub-model boundaries
    layers_per_sub: int = 2
    precision: str = "f32"
    # explicit per-layer sizes and cut points override dims/layers_per_sub
    layer_sizes: Optional[tuple] = None
    cuts: Optional[tuple] = None

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def n_subs(self) -> int:
        return len(self.layer_dims()[1]) + 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims()[0][0]

    @property
    def classes(self) -> int:
        return self.layer_dims()[0][-1]

    def layer_dims(self) -> tuple[list[int], list[int]]:
        """Full layer-boundary list and cut points.

        Inside sub-model k the hidden width is max(in_k, out_k).
        """
        if self.layer_sizes is not None:
            return list(self.layer_sizes), list(self.cuts or ())
        full = [self.dims[0]]
        cuts = []
        for a, b in zip(self.dims, self.dims[1:]):
            h = max(a, b)
            full += [h] * (self.layers_per_sub - 1) + [b]
            cuts.append(len(full) - 1)
        return full, cuts[:-1]


@dataclass(frozen=True)
class DatasetSpec:
    samples: int = 2000
    spread: float = 1.0
    separation: float = 1.0


@dataclass(frozen=True)
class CongestionSpec:
    link: tuple[str, str]
    bw_bps: int
    at_ns: int
    restore_ns: Optional[int] = None


@dataclass(frozen=True)
class ControllerSpec:
    enabled: bool = True
    link: tuple[str, str] = ("v3", "v4")
    threshold_bps: float = 10e6
    interval_ns: int = NS_PER_S
    window_ns: int = 10 * NS_PER_S
    detour: tuple = ("v6", "v9", "v10", "v7", "v5")
    revert: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    topology: Any = "ten_node"  # "ten_node", a JSON path, or an inline dict
    model: ModelSpec = ModelSpec()
    mode: str = "inference"
    chaining: str = "sfc"
    chain: tuple = ("v6", "v7")
    sr_source: str = "v2"
    sr_endpoint: str = "v5"
    batch_sizes: tuple = (1,)
    rounds: int = 50
    epochs: int = 1
    seed: int = 0
    dataset: DatasetSpec = DatasetSpec()
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    compute: ComputeModel = ComputeModel()
    congestion: Optional[CongestionSpec] = None
    controller: Optional[ControllerSpec] = None
    duration_ns: Optional[int] = None
    timeout_ns: int = 60 * NS_PER_S
    out: Optional[str] = None

    def with_(self, **kw: Any) -> "ScenarioConfig":
        return replace(self, **kw)

    def load_topology(self) -> TopologyConfig:
        ref = self.topology
        if isinstance(ref, dict):
            return parse_topology(ref)
        if ref == "ten_node":
            return ten_node_topology()
        if not isinstance(ref, str):
            raise ConfigError(f"bad topology reference {ref!r}")
        try:
            with open(ref) as fh:
                return parse_topology(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read topology {ref}: {exc}") from None

    def validate(self) -> TopologyConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.chaining not in CHAININGS:
            raise ConfigError(f"chaining must be one of {CHAININGS}")
        if self.model.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.model.layers_per_sub < 1 or min(self.model.dims) < 1:
            raise ConfigError("model dims and layers per sub-model must be positive")
        full, cuts = self.model.layer_dims()
        if min(full) < 1 or any(b <= a for a, b in zip(cuts, cuts[1:])) or (
                cuts and (cuts[0] < 1 or cuts[-1] > len(full) - 2)):
            raise ConfigError(f"inconsistent layer sizes {full} / cuts {cuts}")
        if self.model.n_subs != len(self.chain) + 2:
            raise ConfigError(
                f"{self.model.n_subs} sub-models need {self.model.n_subs - 2} NSFs, "
                f"chain has {len(self.chain)}"
            )
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError("batch sizes must be positive")
        if self.rounds < 1 or self.epochs < 1:
            raise ConfigError("rounds and epochs must be positive")
        topo = self.load_topology()
        ids = {n.id for n in topo.nodes}
        for nid in (*self.chain, self.sr_source, self.sr_endpoint):
            if nid not in ids:
                raise ConfigError(f"scenario references unknown node {nid}")
        for nid in self.chain:
            if "nsf" not in topo.node(nid).roles:
                raise ConfigError(f"chain node {nid} lacks the nsf role")
        if self.chaining == "sfc":
            if topo.node(self.sr_endpoint).sid is None or topo.node(self.sr_source).sid is None:
                raise ConfigError("sfc chaining needs SIDs on the SR source and endpoint")
        if self.congestion is not None:
            pair = tuple(sorted(self.congestion.link))
            if not any(tuple(sorted((l.u, l.v))) == pair for l in topo.links):
                raise ConfigError(f"congestion link {self.congestion.link} not in topology")
        if self.controller is not None and self.controller.enabled:
            for nid in self.controller.detour:
                if nid not in ids:
                    raise ConfigError(f"detour references unknown node {nid}")
        return topo


def _ns(d: dict, key: str, default: Optional[float]) -> Optional[int]:
    v = d.get(key, default)
    return None if v is None else seconds_to_ns(float(v))


def parse_config(data: dict, base_dir: str = ".") -> ScenarioConfig:
    try:
        d = copy.deepcopy(data)
        m = d.get("model", {})
        model = ModelSpec(tuple(int(x) for x in m.get("dims", DESK_DIMS)),
                          int(m.get("layers_per_sub", 2)), m.get("precision", "f32"),
                          None if m.get("layer_sizes") is None
                          else tuple(int(x) for x in m["layer_sizes"]),
                          None if m.get("cuts") is None else tuple(int(x) for x in m["cuts"]))
        ds = d.get("dataset", {})
        dataset = DatasetSpec(int(ds.get("samples", 2000)), float(ds.get("spread", 1.0)),
                              float(ds.get("separation", 1.0)))
        t = d.get("train", {})
        train = nn.TrainConfig(
            eta=float(t.get("eta", 0.1)), momentum=float(t.get("momentum", 0.9)),
            weight_decay=float(t.get("weight_decay", 5e-4)),
            schedule=tuple(tuple(x) for x in t.get("schedule", ((60, 5), (120, 5), (160, 5)))),
        )
        c = d.get("compute", {})
        compute = ComputeModel(float(c.get("base_rate", 1e12)),
                               int(round(float(c.get("fwd_floor_us", 500)) * 1e3)),
                               int(round(float(c.get("bwd_floor_us", 500)) * 1e3)))
        cong = None
        if d.get("congestion"):
            g = d["congestion"]
            cong = CongestionSpec(tuple(g["link"]), int(round(float(g["bw_mbps"]) * 1e6)),
                                  _ns(g, "at_s", None), _ns(g, "restore_s", None))
        ctl = None
        if d.get("controller"):
            g = d["controller"]
            ctl = ControllerSpec(
                enabled=bool(g.get("enabled", True)), link=tuple(g.get("link", ("v3", "v4"))),
                threshold_bps=float(g.get("threshold_mbps", 10)) * 1e6,
                interval_ns=_ns(g, "interval_s", 1), window_ns=_ns(g, "window_s", 10),
                detour=tuple(g.get("detour", ("v6", "v9", "v10", "v7", "v5"))),
                revert=bool(g.get("revert", False)),
            )
        topo = d.get("topology", "ten_node")
        if isinstance(topo, str) and topo != "ten_node" and not os.path.isabs(topo):
            topo = os.path.join(base_dir, topo)
        cfg = ScenarioConfig(
            name=d.get("name", "scenario"),
            topology=topo,
            model=model,
            mode=d.get("mode", "inference"),
            chaining=d.get("chaining", "sfc"),
            chain=tuple(d.get("chain", ("v6", "v7"))),
            sr_source=d.get("sr_source", "v2"),
            sr_endpoint=d.get("sr_endpoint", "v5"),
            batch_sizes=tuple(int(b) for b in d.get("batch_sizes", (1,))),
            rounds=int(d.get("rounds", 50)),
            epochs=int(d.get("epochs", 1)),
            seed=int(d.get("seed", 0)),
            dataset=dataset,
            train=train,
            compute=compute,
            congestion=cong,
            controller=ctl,
            duration_ns=_ns(d, "duration_s", None),
            timeout_ns=_ns(d, "timeout_s", 60),
            out=d.get("out"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario config: {exc!r}") from None
    cfg.validate()
    return cfg


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, os.path.dirname(os.path.abspath(path)))


def preset_path(name: str) -> str:
    return os.path.join(PRESET_DIR, name if name.endswith(".json") else name + ".json")


def load_preset(name: str) -> ScenarioConfig:
    return load_config(preset_path(name))


# -- wiring ----------------------------------------------------------------------


@dataclass
class Scenario:
    cfg: ScenarioConfig
    net: Network
    recorder: Recorder
    model: nn.GlobalModel
    subs: list
    client: ClientApp
    nsfs: list
    server: ServerApp
    controller: Optional[Controller]
    node_order: list  # client, NSFs..., server

    def run(self) -> None:
        self.client.start()
        if self.controller is not None:
            self.controller.start()
        self.net.sim.run(lambda: self.client.done)
        if self.controller is not None:
            self.controller.stop()


def make_dataset(cfg: ScenarioConfig) -> nn.Dataset:
    return nn.gaussian_blobs(cfg.dataset.samples, cfg.model.in_dim, cfg.model.classes,
                             seed=cfg.seed + 1, spread=cfg.dataset.spread,
                             separation=cfg.dataset.separation, dtype=cfg.model.dtype)


def batch_stream(cfg: ScenarioConfig, data: nn.Dataset, batch_size: int,
                 training: bool) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """(epoch, x, y) items: ``epochs`` passes when training, else ``rounds`` batches.

    A time-limited run (``duration_ns``) keeps cycling epochs until stopped.
    """
    epoch = 1
    emitted = 0
    while True:
        for x, y in data.batches(batch_size, epoch, cfg.seed):
            if not training and emitted >= cfg.rounds:
                return
            emitted += 1
            yield epoch, x, y
        epoch += 1
        if training and cfg.duration_ns is None and epoch > cfg.epochs:
            return


def build_scenario(cfg: ScenarioConfig, batch_size: Optional[int] = None,
                   controller: Optional[bool] = None) -> Scenario:
    topo = cfg.validate()
    training = cfg.mode == "training"
    b = batch_size or cfg.batch_sizes[0]
    net = Network(topo)
    if cfg.congestion is not None:
        c = cfg.congestion
        net.set_link_bandwidth(c.link, c.bw_bps, c.at_ns, c.restore_ns)
    rec = Recorder(net)
    full, cuts = cfg.model.layer_dims()
    model = nn.GlobalModel.build(full, cfg.seed, cfg.model.dtype)
    subs = nn.split_model(model, cuts)
    client_id = topo.with_roles("client")[0].id
    server_id = topo.with_roles("server")[0].id
    server_addr = net.node(server_id).address
    chain = list(cfg.chain)

    sfc = cfg.chaining == "sfc"
    transparent = cfg.chaining in ("sfc", "transparent-no-srv6")
    if transparent:
        targets = [(server_addr, SERVICE_PORT)] * (len(chain) + 1)
    else:
        targets = [(net.node(n).address, SERVICE_PORT) for n in chain + [server_id]]
    rule = InterceptRule(server_addr, SERVICE_PORT) if transparent else None

    server = ServerApp(net, server_id, subs[-1], rec, cfg.compute, training, cfg.train)
    nsfs = [
        NsfApp(net, nid, subs[i + 1], targets[i + 1], rec, cfg.compute, training, cfg.train,
               rule=rule, sfc_proxy=sfc)
        for i, nid in enumerate(chain)
    ]
    data = make_dataset(cfg)
    client = ClientApp(net, client_id, subs[0], targets[0], batch_stream(cfg, data, b, training),
                       rec, cfg.compute, training, cfg.train, cfg.timeout_ns,
                       stop_at=cfg.duration_ns)

    ctl = None
    if sfc:
        sids = [net.node(n).sid for n in chain]
        primary = tuple(sids + [net.node(cfg.sr_endpoint).sid])
        net.node(cfg.sr_source).sr_policies.append(
            SrPolicy(server_addr, SERVICE_PORT, list(primary)))
        use_ctl = cfg.controller is not None and cfg.controller.enabled
        if controller is not None:
            use_ctl = controller and cfg.controller is not None
        if use_ctl:
            cc = cfg.controller
            detour = []
            for nid in cc.detour:
                s = net.node(nid).sid
                if s is None:
                    raise ConfigError(f"detour node {nid} has no SID")
                detour.append(s)
            policy = PathPolicy(primary, tuple(detour), cc.link)
            try:
                policy.check_chain(sids)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            ctl = Controller(net, MonitorConfig(cc.link, cc.threshold_bps, cc.interval_ns,
                                                cc.window_ns),
                             policy, cfg.sr_source, cc.revert)
    return Scenario(cfg, net, rec, model, subs, client, nsfs, server, ctl,
                    [client_id, *chain, server_id])
