import pytest

from nsfchain.flows import (
    FlowTable,
    FlowValue,
    MissingFlow,
    PassThrough,
    egress_encap,
    ingress_decap,
    rekey,
)
from nsfchain.srv6 import (
    FiveTuple,
    InnerPacket,
    Srv6Packet,
    encapsulate,
    five_tuple_of,
    process_endpoint,
    sid,
)

V = {n: sid(f"2001:db8::{n:x}") for n in range(1, 11)}


def _first_hop(table, sport=40001):
    inner = InnerPacket.make(V[1], V[8], sport, 9000, payload=b"act")
    pkt = encapsulate(inner, [V[6], V[7], V[5]], V[2])
    return inner, pkt, ingress_decap(pkt, V[6], table, now=0)


def test_ingress_stores_flow():
    table = FlowTable()
    inner, pkt, out = _first_hop(table)
    assert out == inner
    key = FiveTuple(6, V[1], V[8], 40001, 9000)
    value = table.get(key)
    assert value.srh.segments_left == 1
    assert value.outer.dst == V[7]
    assert len(table) == 1


def test_ingress_overwrite_and_mismatch():
    table = FlowTable()
    _, pkt, _ = _first_hop(table)
    ingress_decap(pkt, V[6], table, now=5)
    assert len(table) == 1
    assert ingress_decap(pkt, V[7], table) is None
    assert len(table) == 1


def test_rekey_continuity():
    table = FlowTable()
    inner, pkt, _ = _first_hop(table)
    stored = table.get(five_tuple_of(inner))
    new = FiveTuple(6, V[6], V[8], 40002, 9000)
    rekey(table, five_tuple_of(inner), new)
    assert table.get(new) == stored
    assert table.get(five_tuple_of(inner)) == stored
    rekey(table, five_tuple_of(inner), new)
    assert len(table) == 2

    out_inner = InnerPacket.make(V[6], V[8], 40002, 9000, payload=b"next")
    out = egress_encap(out_inner, table)
    assert isinstance(out, Srv6Packet)
    assert out.srh == stored.srh
    assert out.outer.dst == V[7]
    assert out.inner.header.src == V[6]

    # next SID intercepts and reproduces the inner bytes
    nxt = FlowTable()
    wire = Srv6Packet.from_bytes(out.to_bytes())
    got = ingress_decap(wire, V[7], nxt)
    assert got.to_bytes() == out_inner.to_bytes()
    assert nxt.get(five_tuple_of(out_inner)).outer.dst == V[5]


def test_rekey_missing():
    table = FlowTable()
    with pytest.raises(MissingFlow):
        rekey(table, FiveTuple(6, V[1], V[8], 1, 2), FiveTuple(6, V[6], V[8], 3, 2))


def test_passthrough():
    table = FlowTable()
    pkt = InnerPacket.make(V[1], V[8], 1, 2)
    out = egress_encap(pkt, table)
    assert isinstance(out, PassThrough)
    assert out.packet is pkt
    assert table.passthrough_count == 1


def test_alias_follows_overwrite():
    table = FlowTable()
    inner, pkt, _ = _first_hop(table)
    new = FiveTuple(6, V[6], V[8], 40002, 9000)
    rekey(table, five_tuple_of(inner), new)
    other = encapsulate(inner, [V[6], V[9], V[5]], V[2])
    ingress_decap(other, V[6], table)
    assert table.get(new).outer.dst == V[9]


def test_lru_eviction():
    table = FlowTable(capacity=2)
    keys = [FiveTuple(6, V[1], V[8], p, 9000) for p in (1, 2, 3)]
    _, pkt, _ = _first_hop(FlowTable())
    val = FlowValue(pkt.outer, pkt.srh)
    table.put(keys[0], val, 0)
    table.put(keys[1], val, 1)
    table.get(keys[0], 2)
    table.put(keys[2], val, 3)
    assert keys[1] not in table
    assert keys[0] in table and keys[2] in table
    assert table.evictions == [keys[1]]


def test_idle_timeout():
    table = FlowTable(idle_timeout_ns=100)
    _, pkt, _ = _first_hop(FlowTable())
    key = FiveTuple(6, V[1], V[8], 1, 9000)
    table.put(key, FlowValue(pkt.outer, pkt.srh), 0)
    assert table.get(key, 100) is not None
    assert table.get(key, 201) is None
    assert len(table) == 0


def test_to_json():
    table = FlowTable()
    inner, _, _ = _first_hop(table)
    dump = table.to_json()
    key = str(five_tuple_of(inner))
    assert key == f"6|{V[1]}|{V[8]}|40001|9000"
    assert dump[key]["outer_dst"] == str(V[7])
    assert len(bytes.fromhex(dump[key]["srh"])) == 56
