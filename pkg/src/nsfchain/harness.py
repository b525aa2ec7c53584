"""Experiment runners and metrics emission."""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import nn
from .netsim.engine import SimulationError
from .scenario import Scenario, ScenarioConfig, build_scenario

BASE_COLUMNS = [
    "round", "epoch", "batch_size", "status", "t_start_ns", "t_end_ns", "total_ns",
    "compute_ns", "fwd_ns", "bwd_ns", "act_tx_ns", "grad_tx_ns", "result_tx_ns",
    "identity_ok", "client_fwd_ns", "client_send_ns", "client_wait_ns", "client_recv_ns",
    "client_bwd_ns",
]
TAIL_COLUMNS = ["loss", "accuracy", "nsf_execs", "srh_overhead_bytes", "wire_bytes",
                "path_fwd", "path_ret"]


class Divergence(RuntimeError):
    pass


def _join_paths(paths: list[list[str]]) -> list[str]:
    out: list[str] = []
    for p in paths:
        out += p[1:] if out and out[-1] == p[0] else p
    return out


def columns_for(node_order: list[str]) -> list[str]:
    cols = list(BASE_COLUMNS)
    for nid in node_order:
        cols += [f"fwd_{nid}_ns", f"bwd_{nid}_ns"]
    for nid in node_order[:-1]:
        cols.append(f"wait_{nid}_ns")
    return cols + TAIL_COLUMNS


def round_rows(scn: Scenario) -> list[dict]:
    """One row per client round, decomposed from the event trace."""
    rec = scn.recorder
    spans = defaultdict(list)
    for s in rec.spans:
        spans[s.round].append(s)
    legs = defaultdict(list)
    for leg in rec.legs:
        legs[leg.round].append(leg)
    waits = defaultdict(dict)
    for rnd, nid, w in rec.waits:
        waits[rnd][nid] = w
    overhead = defaultdict(int)
    wire = defaultdict(int)
    for r in scn.net.log.records:
        if r["dir"] == "rx":
            overhead[r["round"]] += r["npkts"] * r["encap"]
            wire[r["round"]] += r["bytes"]
    client, server = scn.node_order[0], scn.node_order[-1]
    nsf_ids = set(scn.node_order[1:-1])
    rows = []
    for cr in rec.rounds:
        r = cr.round
        sp, lg = spans[r], sorted(legs[r], key=lambda l: l.send_start)
        fwd = sum(s.end - s.start for s in sp if s.phase == "fwd")
        bwd = sum(s.end - s.start for s in sp if s.phase == "bwd")
        tx = {k: sum(l.duration for l in lg if l.kind == k) for k in ("act", "grad", "result")}
        end = cr.end if cr.end is not None else cr.start
        total = end - cr.start
        row: dict[str, Any] = {
            "round": r, "epoch": cr.epoch, "batch_size": cr.batch, "status": cr.status,
            "t_start_ns": cr.start, "t_end_ns": end, "total_ns": total,
            "compute_ns": fwd + bwd, "fwd_ns": fwd, "bwd_ns": bwd,
            "act_tx_ns": tx["act"], "grad_tx_ns": tx["grad"], "result_tx_ns": tx["result"],
        }
        row["identity_ok"] = int(cr.status != "timeout" and total == fwd + bwd + sum(tx.values()))
        out_leg = next((l for l in lg if l.src == client), None)
        in_leg = next((l for l in reversed(lg) if l.dst == client), None)
        c_fwd = sum(s.end - s.start for s in sp if s.node == client and s.phase == "fwd")
        c_bwd = sum(s.end - s.start for s in sp if s.node == client and s.phase == "bwd")
        row["client_fwd_ns"] = c_fwd
        row["client_bwd_ns"] = c_bwd
        if out_leg is not None and in_leg is not None:
            row["client_send_ns"] = out_leg.send_end - out_leg.send_start
            row["client_wait_ns"] = in_leg.recv_start - out_leg.send_end
            row["client_recv_ns"] = in_leg.recv_end - in_leg.recv_start
        else:
            row["client_send_ns"] = row["client_wait_ns"] = row["client_recv_ns"] = ""
        for nid in scn.node_order:
            row[f"fwd_{nid}_ns"] = sum(s.end - s.start for s in sp
                                       if s.node == nid and s.phase == "fwd")
            row[f"bwd_{nid}_ns"] = sum(s.end - s.start for s in sp
                                       if s.node == nid and s.phase == "bwd")
        for nid in scn.node_order[:-1]:
            row[f"wait_{nid}_ns"] = waits[r].get(nid, "")
        loss, acc = rec.stats.get(r, ("", ""))
        row["loss"] = "" if loss == "" else repr(float(loss))
        row["accuracy"] = "" if acc == "" else repr(float(acc))
        row["nsf_execs"] = sum(1 for s in sp if s.node in nsf_ids and s.phase == "fwd")
        row["srh_overhead_bytes"] = overhead[r]
        row["wire_bytes"] = wire[r]
        row["path_fwd"] = "-".join(_join_paths([l.path for l in lg if l.kind == "act"]))
        row["path_ret"] = "-".join(_join_paths([l.path for l in lg if l.kind != "act"]))
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


@dataclass
class RunResult:
    scenario: Scenario
    rows: list[dict]
    columns: list[str]
    summary: dict = field(default_factory=dict)

    @property
    def metrics_csv(self) -> str:
        return rows_to_csv(self.rows, self.columns)

    @property
    def traffic_jsonl(self) -> str:
        return self.scenario.net.log.to_jsonl()

    @property
    def events(self) -> list:
        ctl = self.scenario.controller
        return [] if ctl is None else ctl.events

    def write(self, out_dir: str, prefix: str) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for suffix, text in (("rounds.csv", self.metrics_csv),
                             ("traffic.jsonl", self.traffic_jsonl),
                             ("summary.json", dump_json(self.summary))):
            p = os.path.join(out_dir, f"{prefix}_{suffix}")
            with open(p, "w") as fh:
                fh.write(text)
            paths.append(p)
        return paths


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _median(xs: list[int]) -> Optional[float]:
    return float(statistics.median(xs)) if xs else None


def summarize(scn: Scenario, rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] != "timeout"]
    execs = {f"{n}/{p}": c for (n, p), c in sorted(scn.recorder.executions.items())}
    return {
        "name": scn.cfg.name,
        "mode": scn.cfg.mode,
        "chaining": scn.cfg.chaining,
        "seed": scn.cfg.seed,
        "rounds": len(rows),
        "failed_rounds": len(rows) - len(ok),
        "rejected_rounds": sum(1 for r in rows if r["status"] == "rejected"),
        "identity_holds": all(r["identity_ok"] for r in ok),
        "median_total_ns": _median([r["total_ns"] for r in ok]),
        "executions": execs,
        "rekeys": scn.recorder.rekeys,
        "reconfigurations": [e.to_json() for e in
                             (scn.controller.events if scn.controller else [])],
        "end_time_ns": scn.net.sim.now,
    }


def run_scenario(cfg: ScenarioConfig, batch_size: Optional[int] = None,
                 controller: Optional[bool] = None) -> RunResult:
    scn = build_scenario(cfg, batch_size, controller)
    try:
        scn.run()
    except SimulationError as exc:
        if isinstance(exc.cause, nn.ModelError) and "diverged" in str(exc.cause):
            raise Divergence(str(exc)) from exc
        raise
    rows = round_rows(scn)
    return RunResult(scn, rows, columns_for(scn.node_order), summarize(scn, rows))


# -- experiment families -----------------------------------------------------------


def sweep_aggregate(results: dict[int, RunResult], discard_first: bool = True) -> list[dict]:
    out = []
    for b, res in results.items():
        rows = [r for r in res.rows if r["status"] != "timeout"]
        if discard_first:
            rows = [r for r in rows if r["round"] != 1]
        n = len(rows)
        mean = lambda key: sum(r[key] for r in rows) / n if n else 0.0  # noqa: E731
        total = mean("total_ns")
        act = mean("act_tx_ns")
        out.append({
            "batch_size": b,
            "rounds": n,
            "total_ns": total,
            "compute_ns": mean("compute_ns"),
            "act_tx_ns": act,
            "result_tx_ns": mean("result_tx_ns"),
            "act_tx_share": act / total if total else 0.0,
        })
    return out


@dataclass
class SweepResult:
    runs: dict[int, RunResult]
    aggregate: list[dict]

    def write(self, out_dir: str) -> list[str]:
        paths = []
        for b, res in self.runs.items():
            paths += res.write(out_dir, f"sweep_b{b}")
        p = os.path.join(out_dir, "sweep_aggregate.csv")
        cols = ["batch_size", "rounds", "total_ns", "compute_ns", "act_tx_ns",
                "result_tx_ns", "act_tx_share"]
        with open(p, "w") as fh:
            fh.write(rows_to_csv([{k: repr(v) if isinstance(v, float) else v
                                   for k, v in r.items()} for r in self.aggregate], cols))
        return paths + [p]


def run_inference_sweep(cfg: ScenarioConfig) -> SweepResult:
    cfg = cfg.with_(mode="inference")
    runs = {b: run_scenario(cfg, b) for b in cfg.batch_sizes}
    return SweepResult(runs, sweep_aggregate(runs))


def epoch_stats(rows: list[dict]) -> list[dict]:
    """Per-epoch mean loss and sample-weighted training accuracy."""
    acc = defaultdict(lambda: [0.0, 0.0, 0, 0])
    for r in rows:
        if r["loss"] == "":
            continue
        e = acc[r["epoch"]]
        e[0] += float(r["loss"]) * r["batch_size"]
        e[1] += float(r["accuracy"]) * r["batch_size"]
        e[2] += r["batch_size"]
        e[3] += 1
    return [{"epoch": ep, "loss": v[0] / v[2], "accuracy": v[1] / v[2], "rounds": v[3]}
            for ep, v in sorted(acc.items())]


def run_training(cfg: ScenarioConfig) -> RunResult:
    cfg = cfg.with_(mode="training")
    res = run_scenario(cfg, cfg.batch_sizes[0])
    res.summary["epochs"] = epoch_stats(res.rows)
    return res


def checkpoints(res: RunResult) -> dict[str, bytes]:
    scn = res.scenario
    return {nid: nn.save_checkpoint(sub.layers) for nid, sub in zip(scn.node_order, scn.subs)}


def steady(rows: list[dict], lo: int, hi: int, skip: int = 0) -> list[int]:
    """Totals of completed rounds that start at/after ``lo`` and end by ``hi``."""
    sel = [r for r in rows if r["status"] == "ok" and r["t_start_ns"] >= lo
           and r["t_end_ns"] <= hi]
    return [r["total_ns"] for r in sel[skip:]]


def congestion_analysis(cfg: ScenarioConfig, controlled: RunResult,
                        baseline: RunResult, settle_rounds: int = 5) -> dict:
    onset = cfg.congestion.at_ns
    restore = cfg.congestion.restore_ns or controlled.scenario.net.sim.now
    pre = steady(controlled.rows, max(1, onset - 5 * 10**9), onset)
    pre_ref = _median(pre)
    events = controlled.events
    t_rc = events[0].t if events else None
    post = steady(controlled.rows, t_rc, restore, settle_rounds) if t_rc is not None else []
    base = steady(baseline.rows, onset, restore)
    out = {
        "onset_ns": onset,
        "restore_ns": restore,
        "pre_cap_median_ns": pre_ref,
        "pre_cap_rounds": len(pre),
        "reconfig_t_ns": t_rc,
        "detection_delay_ns": None if t_rc is None else t_rc - onset,
        "post_detour_median_ns": _median(post),
        "post_detour_max_ns": max(post) if post else None,
        "post_detour_rounds": len(post),
        "baseline_capped_min_ns": min(base) if base else None,
        "baseline_capped_rounds": len(base),
    }
    if pre_ref:
        out["post_ratio_max"] = out["post_detour_max_ns"] / pre_ref if post else None
        out["baseline_ratio_min"] = out["baseline_capped_min_ns"] / pre_ref if base else None
    return out


@dataclass
class CongestionResult:
    controlled: RunResult
    baseline: RunResult
    analysis: dict

    def write(self, out_dir: str) -> list[str]:
        paths = self.controlled.write(out_dir, "congestion_sfc")
        paths += self.baseline.write(out_dir, "congestion_baseline")
        p = os.path.join(out_dir, "congestion_analysis.json")
        with open(p, "w") as fh:
            fh.write(dump_json(self.analysis))
        return paths + [p]


def run_congestion_scenario(cfg: ScenarioConfig) -> CongestionResult:
    if cfg.congestion is None:
        from .netsim.topology import ConfigError
        raise ConfigError("congestion scenario needs a congestion schedule")
    b = cfg.batch_sizes[0]
    controlled = run_scenario(cfg.with_(chaining="sfc"), b, controller=True)
    baseline = run_scenario(cfg.with_(chaining="sfc"), b, controller=False)
    return CongestionResult(controlled, baseline, congestion_analysis(cfg, controlled, baseline))


@dataclass
class CompareResult:
    runs: dict[str, RunResult]
    report: dict

    @property
    def ok(self) -> bool:
        return self.report["ok"]

    def write(self, out_dir: str) -> list[str]:
        paths = []
        for mode, res in self.runs.items():
            paths += res.write(out_dir, f"compare_{mode}")
        p = os.path.join(out_dir, "compare_report.json")
        with open(p, "w") as fh:
            fh.write(dump_json(self.report))
        return paths + [p]


def compare_chaining_modes(cfg: ScenarioConfig, rounds: Optional[int] = None) -> CompareResult:
    cfg = cfg.with_(rounds=rounds or cfg.rounds, controller=None, congestion=None)
    runs = {}
    for mode in ("sfc", "traditional", "transparent-no-srv6"):
        runs[mode] = run_scenario(cfg.with_(chaining=mode), cfg.batch_sizes[0])
    report: dict[str, Any] = {"modes": {}}
    chain = list(cfg.chain)
    for mode, res in runs.items():
        ex = res.scenario.recorder.executions
        report["modes"][mode] = {
            "median_total_ns": res.summary["median_total_ns"],
            "nsf_fwd_executions": {n: ex[(n, "fwd")] for n in chain},
            "rejected_rounds": res.summary["rejected_rounds"],
            "paths_fwd": sorted({r["path_fwd"] for r in res.rows}),
            "paths_ret": sorted({r["path_ret"] for r in res.rows}),
            "srh_overhead_bytes_per_round": [r["srh_overhead_bytes"] for r in res.rows],
            "wire_bytes_per_round": [r["wire_bytes"] for r in res.rows],
        }
    sfc, trad = runs["sfc"], runs["traditional"]
    if cfg.mode == "training":
        same = all(np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                   for sa, sb in zip(sfc.scenario.subs, trad.scenario.subs)
                   for a, b in zip(sa.layers, sb.layers))
    else:
        outs = lambda res: [r.output for r in res.scenario.recorder.rounds]  # noqa: E731
        same = all(a is not None and b is not None and np.array_equal(a, b)
                   for a, b in zip(outs(sfc), outs(trad)))
    same = same and len(sfc.rows) == len(trad.rows)
    extra = [s["wire_bytes"] - t["wire_bytes"] for s, t in zip(sfc.rows, trad.rows)]
    overhead_only = extra == [r["srh_overhead_bytes"] for r in sfc.rows]
    bypassed = all(report["modes"]["transparent-no-srv6"]["nsf_fwd_executions"][n] == 0
                   for n in chain)
    report.update({
        "sfc_traditional_outputs_identical": same,
        "sfc_extra_bytes_per_round": extra,
        "sfc_extra_bytes_are_srh_only": overhead_only,
        "bypass_detected": bypassed,
        "ok": same and overhead_only,
    })
    return CompareResult(runs, report)
