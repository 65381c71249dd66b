import heapq
import math
import random
from collections import Counter, deque

import pytest
from hypothesis import given, settings, strategies as st

from torpush_sim.gossip import (ANOMALY_BASE_PORT, BASE_PORT, DiscoveryDirectory, MeshError,
                                MeshState, PeerScore, apply_spam, build_mesh, on_receive, publish)
from torpush_sim.model import MessageFactory, SimConfig


def make_mesh(n, d=8, seed=7, **kw):
    cfg = SimConfig(n_nonTor_nodes=n, out_degree=d, **kw)
    return build_mesh(cfg, DiscoveryDirectory(n), random.Random(seed))


def bfs_component(peers, start, blocked=lambda a, b: False):
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in peers[u]:
            if v not in seen and not blocked(u, v):
                seen.add(v)
                queue.append(v)
    return seen


def run_to_quiescence(state, first):
    """Drives deliveries in time order; returns the number of delivery events."""
    heap = [(d.time, i, d) for i, d in enumerate(first)]
    heapq.heapify(heap)
    seq = len(heap)
    count = 0
    while heap:
        _, _, d = heapq.heappop(heap)
        count += 1
        for nd in on_receive(state, d.to, d.msg, d.time, d.frm):
            seq += 1
            heapq.heappush(heap, (nd.time, seq, nd))
    return count


def attestation(t=0.0, originator=0):
    return MessageFactory().data("attestation", originator, 0, 288, t)


# --- build_mesh --------------------------------------------------------------


def test_two_nodes_peer_each_other():
    state = make_mesh(2)
    assert state.peers == [(1,), (0,)]


def test_fifty_node_mesh_connected_and_bounded():
    state = make_mesh(50, 8, seed=7)
    assert len(bfs_component(state.peers, 0)) == 50
    assert max(len(p) for p in state.peers) <= 8
    assert min(len(p) for p in state.peers) >= 1
    for u, ps in enumerate(state.peers):
        assert all(u in state.peers[v] for v in ps)


def test_mesh_deterministic():
    assert make_mesh(50, 8, seed=7).edges() == make_mesh(50, 8, seed=7).edges()


def test_mesh_construction_failure():
    cfg = SimConfig(n_nonTor_nodes=50, out_degree=1)
    with pytest.raises(MeshError, match="mesh construction failed"):
        build_mesh(cfg, DiscoveryDirectory(50), random.Random(0), max_attempts=5)


def test_directory_must_cover_nodes():
    cfg = SimConfig(n_nonTor_nodes=10)
    with pytest.raises(MeshError):
        build_mesh(cfg, DiscoveryDirectory(9), random.Random(0))


# --- publish / on_receive ----------------------------------------------------


def _node_with_degree(state, k):
    return next(u for u, ps in enumerate(state.peers) if len(ps) == k)


def test_publish_fanout_equals_degree():
    state = make_mesh(30, 3, seed=2)
    node = _node_with_degree(state, 3)
    out = publish(state, node, attestation(), 0.0)
    assert len(out) == 3
    assert {d.to for d in out} == set(state.peers[node])
    assert all(d.latency > 0 and d.time == d.latency for d in out)


def test_publish_twice_dedups():
    state = make_mesh(10, 3)
    msg = attestation()
    assert publish(state, 0, msg, 0.0)
    assert publish(state, 0, msg, 1.0) == []


def test_on_receive_excludes_sender():
    state = make_mesh(30, 4, seed=3)
    node = _node_with_degree(state, 4)
    msg = attestation()
    sender = state.peers[node][0]
    out = on_receive(state, node, msg, 5.0, sender)
    assert len(out) == 3 and sender not in {d.to for d in out}
    assert on_receive(state, node, msg, 6.0, sender) == []
    assert state.seen[node][msg.id] == 5.0


def test_flood_reaches_component():
    state = make_mesh(50, 8, seed=11)
    msg = attestation()
    run_to_quiescence(state, publish(state, 4, msg, 0.0))
    assert set(state.reached(msg.id)) == bfs_component(state.peers, 4)


def test_injection_reaches_all_thirty():
    state = make_mesh(30, 5, seed=4)
    msg = attestation()
    run_to_quiescence(state, on_receive(state, 17, msg, 0.0))
    assert len(state.reached(msg.id)) == 30


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 10), st.integers(0, 10_000))
def test_termination_bound_and_dedup(n, d, seed):
    cfg = SimConfig(n_nonTor_nodes=n, out_degree=d)
    try:
        state = build_mesh(cfg, DiscoveryDirectory(n), random.Random(seed), max_attempts=20)
    except MeshError:
        return
    state.record_node_trace = True
    msg = attestation()
    events = run_to_quiescence(state, publish(state, 0, msg, 0.0))
    assert events <= n * d
    per_node = Counter(row[0] for row in state.node_trace if row[-1] == "relay")
    assert all(c == 1 for c in per_node.values())


def test_flood_with_blacklisted_links_matches_oracle():
    state = make_mesh(40, 4, seed=5)
    rng = random.Random(1)
    for u, v in rng.sample(sorted(state.edges()), 25):
        apply_spam(state, u, v, 11)
    msg = attestation()
    run_to_quiescence(state, publish(state, 0, msg, 0.0))
    assert set(state.reached(msg.id)) == bfs_component(state.peers, 0, state.link_blocked)


def test_fate_sharing():
    state = make_mesh(40, 6, seed=8)
    b = 9
    for p in state.peers[b]:
        apply_spam(state, p, b, 11)
    msg = attestation()
    run_to_quiescence(state, on_receive(state, b, msg, 0.0))
    assert state.reached(msg.id) == [b]


def test_throttle_defers_instead_of_dropping():
    state = make_mesh(40, 6, seed=8, throttle_instead_of_blacklist=True)
    b = 9
    for p in state.peers[b]:
        apply_spam(state, p, b, 11)
    first = on_receive(state, b, attestation(), 0.0)
    assert len(first) == len(state.peers[b])
    second = on_receive(state, b, attestation(originator=1), 100.0)
    assert all(d.time >= 12_000.0 for d in second)


# --- peer scoring ------------------------------------------------------------


def test_spam_threshold_boundary():
    state = make_mesh(5, 2)
    assert apply_spam(state, 0, 1, 10) == -100.0
    assert not state.scores.blacklisted(0, 1)
    assert apply_spam(state, 0, 1, 1) == -110.0
    assert state.scores.blacklisted(0, 1)


def test_decay_closed_form():
    sc = PeerScore(decay=0.99)
    sc.scores[(0, 1)] = -110.0
    sc.decay(100)
    assert sc.score(0, 1) == pytest.approx(-110.0 * math.pow(0.99, 100), rel=1e-12)
    assert sc.score(0, 1) == pytest.approx(-40.25, abs=0.02)
    assert not sc.blacklisted(0, 1)


def test_negative_spam_count_rejected():
    with pytest.raises(ValueError):
        apply_spam(make_mesh(3, 2), 0, 1, -1)


@given(st.lists(st.integers(0, 50), max_size=20))
def test_scores_never_increase_without_decay(counts):
    cfg = SimConfig(n_nonTor_nodes=3, out_degree=2, score_decay=1.0)
    state = MeshState(cfg, [(1, 2), (0, 2), (0, 1)], DiscoveryDirectory(3), random.Random(0))
    prev = 0.0
    for c in counts:
        cur = apply_spam(state, 0, 1, c)
        state.scores.decay(1)
        assert cur <= prev and state.scores.score(0, 1) == cur
        prev = cur


# --- discovery ---------------------------------------------------------------


def test_honest_directory_same_for_everyone():
    d = DiscoveryDirectory(5, torpush_nodes=[2])
    a, b = d.query("1.1.1.1"), d.query("2.2.2.2")
    assert a == b
    assert all(e.port == BASE_PORT for e in a)
    assert [e.torpush_capable for e in a] == [False, False, True, False, False]


def test_adversarial_directory_unique_ports():
    d = DiscoveryDirectory(5, adversary_node=3)
    ports = [d.query(r)[3].port for r in ("a", "b", "a", "c")]
    assert ports == [ANOMALY_BASE_PORT, ANOMALY_BASE_PORT + 1, ANOMALY_BASE_PORT, ANOMALY_BASE_PORT + 2]
    assert d.requester_for_port(ANOMALY_BASE_PORT + 1) == "b"
    assert d.requester_for_port(1) is None
    assert d.query("z")[0].port == BASE_PORT
