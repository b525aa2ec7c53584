import pytest

from nsfchain.controller import (
    Controller,
    MonitorConfig,
    PathPolicy,
    detect_congestion,
)
from nsfchain.harness import run_scenario
from nsfchain.netsim.engine import NS_PER_MS, NS_PER_S
from nsfchain.netsim.network import SrPolicy, build_topology
from nsfchain.netsim.topology import node_address, ten_node_topology
from nsfchain.scenario import ControllerSpec, CongestionSpec, ScenarioConfig

MBPS = 1_000_000
A = node_address
PRIMARY = (A("v6"), A("v7"), A("v5"))
DETOUR = (A("v6"), A("v9"), A("v10"), A("v7"), A("v5"))


def _controller(revert=False):
    net = build_topology(ten_node_topology())
    net.node("v2").sr_policies.append(SrPolicy(A("v8"), 9000, list(PRIMARY)))
    ctl = Controller(net, MonitorConfig(("v3", "v4"), 10 * MBPS),
                     PathPolicy(PRIMARY, DETOUR, ("v3", "v4")), "v2", revert)
    return net, ctl


def test_monitor_config():
    assert MonitorConfig(("v3", "v4"), 1).history_len == 10
    with pytest.raises(ValueError):
        MonitorConfig(("v3", "v4"), 1, interval_ns=0)
    with pytest.raises(ValueError):
        MonitorConfig(("v3", "v4"), 1, interval_ns=10, window_ns=5)


def test_detect_congestion():
    assert detect_congestion([5 * MBPS] * 10, 10 * MBPS, 10)
    assert not detect_congestion([5 * MBPS] * 9 + [1000 * MBPS], 10 * MBPS, 10)
    assert not detect_congestion([5 * MBPS] * 9, 10 * MBPS, 10)
    # a cap exactly at the threshold counts as congested
    assert detect_congestion([10 * MBPS] * 10, 10 * MBPS, 10)


def test_poll_ring():
    net, ctl = _controller()
    _, sample = ctl.poll(NS_PER_S)
    assert sample == 1000 * MBPS and len(ctl.history) == 1
    for k in range(2, 30):
        ctl.poll(k * NS_PER_S)
        assert len(ctl.history) <= 10
    assert len(ctl.history) == 10


def test_check_chain():
    sids = [A("v6"), A("v7")]
    PathPolicy(PRIMARY, DETOUR, ("v3", "v4")).check_chain(sids)
    with pytest.raises(ValueError):
        PathPolicy(PRIMARY, (A("v7"), A("v6"), A("v5")), ("v3", "v4")).check_chain(sids)
    with pytest.raises(ValueError):
        PathPolicy(PRIMARY, (A("v6"), A("v7"), A("v8")), ("v3", "v4")).check_chain(sids)


def test_reconfigure_idempotent():
    net, ctl = _controller()
    assert ctl.reconfigure()
    assert tuple(net.node("v2").sr_policies[0].traversal) == DETOUR
    assert not ctl.reconfigure()
    assert len(ctl.events) == 1
    ev = ctl.events[0].to_json()
    assert ev["trigger_link"] == ["v3", "v4"]
    assert ev["new"].split(",")[1] == str(A("v9"))


def test_detection_bound_and_one_shot():
    net, ctl = _controller()
    onset = 3 * NS_PER_S + 400 * NS_PER_MS
    net.set_link_bandwidth(("v3", "v4"), 10 * MBPS, onset)
    ctl.start()
    net.run_until(40 * NS_PER_S)
    assert len(ctl.events) == 1
    t = ctl.events[0].t
    assert onset < t <= onset + 11 * NS_PER_S
    assert all(s <= 10 * MBPS for s in ctl.events[0].samples)


def test_revert_when_enabled():
    net, ctl = _controller(revert=True)
    net.set_link_bandwidth(("v3", "v4"), 10 * MBPS, NS_PER_S, restore_ns=15 * NS_PER_S)
    ctl.start()
    net.run_until(40 * NS_PER_S)
    assert [tuple(e.new) for e in ctl.events] == [DETOUR, PRIMARY]


def _fast_cfg(controller=True):
    return ScenarioConfig(
        name="ctl", batch_sizes=(8,), rounds=10_000, seed=1,
        congestion=CongestionSpec(("v3", "v4"), MBPS, 30 * NS_PER_MS),
        controller=ControllerSpec(threshold_bps=MBPS, interval_ns=5 * NS_PER_MS,
                                  window_ns=20 * NS_PER_MS) if controller else None,
        duration_ns=400 * NS_PER_MS,
    )


def test_detour_service_path():
    res = run_scenario(_fast_cfg())
    t_rc = res.events[0].t
    assert t_rc <= 30 * NS_PER_MS + 25 * NS_PER_MS
    primary = "v1-v2-v3-v6-v3-v4-v7-v4-v5-v8"
    detour = "v1-v2-v3-v6-v3-v9-v10-v4-v7-v4-v5-v8"
    before = [r for r in res.rows if r["t_start_ns"] < 30 * NS_PER_MS and r["status"] == "ok"]
    after = [r for r in res.rows if r["t_start_ns"] > t_rc]
    assert before and after
    assert all(r["path_fwd"] == primary for r in before)
    assert all(r["path_fwd"] == detour for r in after)
    for r in after:
        p = r["path_fwd"].split("-")
        between = p[p.index("v6"):p.index("v7") + 1]
        assert "v3-v4" not in "-".join(between)
    assert all(r["nsf_execs"] == 2 for r in res.rows if r["status"] == "ok")
