import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from torpush_sim.model import MessageFactory, SimConfig
from torpush_sim.torpush import (FAILED, READY, Relay, RelaySet, TorEndpointState, TorPushError,
                                 build_epoch_circuits, circuits_using, init_guards, make_relays,
                                 on_circuit_failure, push, rebuild, rebuild_delay, select_guard)


def within_3_sigma(hits, n, p):
    return abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def endpoint(d=8, owner=0):
    return TorEndpointState(owner, f"10.0.0.{owner}", d)


def relays_with(bandwidths, **kw):
    return RelaySet([Relay(i, bw, bw, **kw) for i, bw in enumerate(bandwidths)])


# --- guard selection ---------------------------------------------------------


def test_single_eligible_guard():
    rs = RelaySet([Relay(0, 5, 5, is_guard_eligible=False), Relay(1, 1, 1), Relay(2, 9, 9, online=False)])
    rng = random.Random(0)
    assert {select_guard(rs, rng) for _ in range(200)} == {1}


def test_no_guard_possible():
    with pytest.raises(TorPushError, match="guard selection impossible"):
        select_guard(RelaySet([Relay(0, 5, 5, is_guard_eligible=False)]), random.Random(0))


def test_guard_frequency_proportional_to_bandwidth():
    rs = relays_with([300, 100])
    rng = random.Random(12)
    n = 10_000
    hits = sum(select_guard(rs, rng) == 0 for _ in range(n))
    assert within_3_sigma(hits, n, 0.75)


def test_compromised_guard_fraction():
    # 10 compromised relays of bandwidth 10 and 30 honest ones of 30: 100 / 1000.
    rs = RelaySet([Relay(i, 10, 10, compromised=True) for i in range(10)]
                  + [Relay(10 + i, 30, 30) for i in range(30)])
    rng = random.Random(4)
    n = 10_000
    hits = sum(rs[select_guard(rs, rng)].compromised for _ in range(n))
    assert within_3_sigma(hits, n, 0.1)


def test_bandwidth_verification_uses_measured():
    liar = Relay(0, advertised_bandwidth=9000, measured_bandwidth=100)
    honest = Relay(1, 100, 100)
    rng = random.Random(3)
    n = 4000
    naive = sum(select_guard(RelaySet([liar, honest], False), rng) == 0 for _ in range(n))
    verified = sum(select_guard(RelaySet([liar, honest], True), rng) == 0 for _ in range(n))
    assert within_3_sigma(naive, n, 9000 / 9100)
    assert within_3_sigma(verified, n, 0.5)


# --- circuit construction ----------------------------------------------------


def test_default_mode_shares_one_guard():
    rs = make_relays(SimConfig(), random.Random(1))
    ep = endpoint()
    init_guards(ep, rs, random.Random(2), distinct=False)
    build_epoch_circuits(ep, rs, list(range(50)), 1, random.Random(3))
    circs = ep.circuits[1]
    assert len(circs) == 8 and all(c.state == READY for c in circs)
    assert len({c.guard for c in circs}) == 1
    assert len({c.receiving_node for c in circs}) == 8
    assert all(len(set(c.relays)) == 3 for c in circs)


def test_distinct_guards_mode():
    rs = make_relays(SimConfig(), random.Random(1))
    ep = endpoint()
    init_guards(ep, rs, random.Random(2), distinct=True)
    build_epoch_circuits(ep, rs, list(range(50)), 0, random.Random(3))
    assert len({c.guard for c in ep.circuits[0]}) == 8


def test_three_relays_enumeration():
    rs = relays_with([1, 2, 3])
    ep = endpoint(d=2)
    init_guards(ep, rs, random.Random(0), distinct=False)
    build_epoch_circuits(ep, rs, [0, 1], 0, random.Random(1))
    valid = {t for t in itertools.permutations(range(3), 3) if t[0] == ep.guards[0]}
    assert len(valid) == 2
    for c in ep.circuits[0]:
        assert c.state == READY and c.relays in valid


def test_fewer_than_three_online_relays_fail():
    rs = relays_with([1, 2, 3])
    ep = endpoint(d=2)
    init_guards(ep, rs, random.Random(0), distinct=False)
    rs.set_online((ep.guards[0] + 1) % 3, False)
    build_epoch_circuits(ep, rs, [0], 0, random.Random(1))
    assert all(c.state == FAILED for c in ep.circuits[0])


def test_receiving_candidates_round_robin():
    rs = make_relays(SimConfig(), random.Random(1))
    ep = endpoint(d=8)
    init_guards(ep, rs, random.Random(2), distinct=False)
    build_epoch_circuits(ep, rs, [4, 5, 6], 0, random.Random(3))
    nodes = [c.receiving_node for c in ep.circuits[0]]
    assert sorted(set(nodes)) == [4, 5, 6]
    assert max(nodes.count(n) for n in (4, 5, 6)) - min(nodes.count(n) for n in (4, 5, 6)) <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 30), st.integers(1, 10), st.integers(0, 2**31), st.booleans())
def test_ready_circuits_have_distinct_relays(m, d, seed, distinct):
    cfg = SimConfig(n_tor_relays=m, out_degree=d)
    rng = random.Random(seed)
    rs = make_relays(cfg, rng)
    ep = endpoint(d=d)
    init_guards(ep, rs, rng, distinct)
    build_epoch_circuits(ep, rs, list(range(12)), 0, rng)
    for c in ep.circuits[0]:
        if c.state == READY:
            assert len({c.guard, c.middle, c.exit}) == 3
            assert all(rs[r].online for r in c.relays)


# --- push --------------------------------------------------------------------


def _ready_endpoint(cfg=SimConfig()):
    rs = make_relays(cfg, random.Random(1))
    ep = endpoint(d=cfg.out_degree)
    init_guards(ep, rs, random.Random(2), distinct=False)
    build_epoch_circuits(ep, rs, list(range(cfg.n_nonTor_nodes)), 0, random.Random(3))
    return rs, ep


def test_push_rejects_control():
    _, ep = _ready_endpoint()
    ctrl = MessageFactory().control("control_graft", "beacon_attestation", 0.0)
    with pytest.raises(TorPushError, match="control over Tor forbidden"):
        push(ep, ctrl, 0.0, 0, SimConfig(), random.Random(0))


def test_push_one_delivery_per_ready_circuit():
    cfg = SimConfig()
    _, ep = _ready_endpoint(cfg)
    msg = MessageFactory().data("attestation", 0, 3, 288, 100.0)
    out = push(ep, msg, 100.0, 0, cfg, random.Random(9))
    assert len(out) == 8
    assert len({d.arrival for d in out}) == 8
    assert {d.to for d in out} == {c.receiving_node for c in ep.circuits[0]}
    for d in out:
        assert d.n_hops == 3 and d.s_msg == 288
        assert d.arrival == pytest.approx(100.0 + d.l_base + 3 * d.l_hop + 288 / d.c_bw)


def test_push_without_ready_circuits_is_empty():
    cfg = SimConfig()
    _, ep = _ready_endpoint(cfg)
    for c in ep.circuits[0]:
        c.state = FAILED
    msg = MessageFactory().data("attestation", 0, 3, 288, 0.0)
    assert push(ep, msg, 0.0, 0, cfg, random.Random(0)) == []


# --- failures and rebuilds ---------------------------------------------------


def test_guard_outage_fails_all_circuits():
    rs, ep = _ready_endpoint()
    rs.set_online(ep.guards[0], False)
    hit = list(circuits_using([ep], ep.guards[0]))
    assert len(hit) == 8
    for _, c in hit:
        on_circuit_failure(ep, c, 0.0, SimConfig(), random.Random(0))
    assert ep.ready_circuits(0) == []
    assert not rebuild(ep.circuits[0][0], rs, random.Random(1))


def test_middle_outage_is_local():
    rs, ep = _ready_endpoint()
    victim = ep.circuits[0][0].middle
    expected = {c.id for c in ep.circuits[0] if c.uses(victim)}
    rs.set_online(victim, False)
    got = {c.id for _, c in circuits_using([ep], victim)}
    assert got == expected and 0 < len(got) < 8
    for cid in got:
        c = next(c for c in ep.circuits[0] if c.id == cid)
        on_circuit_failure(ep, c, 0.0, SimConfig(), random.Random(0))
    assert len(ep.ready_circuits(0)) == 8 - len(got)
    failed = next(c for c in ep.circuits[0] if c.state == FAILED)
    assert rebuild(failed, rs, random.Random(5))
    assert victim not in failed.relays


def test_rebuild_delay_bounds_and_cdf():
    cfg = SimConfig()
    rng = random.Random(8)
    n = 20_000
    samples = [rebuild_delay(cfg, rng) for _ in range(n)]
    assert all(10_000 < s <= 60_000 for s in samples)
    p = 48 / 50
    assert within_3_sigma(sum(s > 12_000 for s in samples), n, p)
