"""Non-Tor GossipSub-style mesh: discovery, static mesh wiring, flood relay
with deduplication, and a single-counter peer score."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

from .model import TOPICS, Message, NodeId, SimConfig, SlotClock, slot_of

BASE_PORT = 9000
ANOMALY_BASE_PORT = 4000


class MeshError(RuntimeError):
    pass


def node_address(node: NodeId) -> str:
    return f"10.{(node >> 16) & 255}.{(node >> 8) & 255}.{node & 255}"


class DirectoryEntry(NamedTuple):
    node: NodeId
    address: str
    port: int
    torpush_capable: bool


class DiscoveryDirectory:
    """Node address book. In adversarial mode the entry for
    ``adversary_node`` carries a port unique to each requester address, and
    the requester -> port mapping is kept."""

    def __init__(self, n_nodes: int, torpush_nodes=(), adversary_node: NodeId | None = None):
        self.n_nodes = n_nodes
        self.addresses = [node_address(i) for i in range(n_nodes)]
        self.torpush_capable = [False] * n_nodes
        for node in torpush_nodes:
            self.torpush_capable[node] = True
        self.adversary_node = adversary_node
        self.port_map: dict[str, int] = {}
        self.queries: list[tuple[str, float]] = []

    @property
    def adversarial(self) -> bool:
        return self.adversary_node is not None

    def _port_for(self, node: NodeId, requester: str) -> int:
        if node != self.adversary_node:
            return BASE_PORT
        if requester not in self.port_map:
            self.port_map[requester] = ANOMALY_BASE_PORT + len(self.port_map)
        return self.port_map[requester]

    def query(self, requester: str, t: float = 0.0) -> list[DirectoryEntry]:
        self.queries.append((requester, t))
        return [
            DirectoryEntry(i, self.addresses[i], self._port_for(i, requester), self.torpush_capable[i])
            for i in range(self.n_nodes)
        ]

    def requester_for_port(self, port: int) -> str | None:
        for requester, p in self.port_map.items():
            if p == port:
                return requester
        return None


class PeerScore:
    """Score of each scored peer as seen by each scorer; missing pairs are 0."""

    def __init__(self, threshold=-100.0, penalty=-10.0, decay=0.99):
        self.threshold = threshold
        self.penalty = penalty
        self.decay_factor = decay
        self.scores: dict[tuple[NodeId, NodeId], float] = {}

    def score(self, scorer: NodeId, peer: NodeId) -> float:
        return self.scores.get((scorer, peer), 0.0)

    def blacklisted(self, scorer: NodeId, peer: NodeId) -> bool:
        return self.scores.get((scorer, peer), 0.0) < self.threshold

    def decay(self, slots: int = 1):
        f = self.decay_factor ** slots
        for key in self.scores:
            self.scores[key] *= f


class Delivery(NamedTuple):
    time: float
    to: NodeId
    frm: NodeId | None  # None: arrived over a Tor circuit
    msg: Message
    latency: float


@dataclass
class MeshState:
    cfg: SimConfig
    peers: list[tuple[NodeId, ...]]
    directory: DiscoveryDirectory
    rng: random.Random
    subscriptions: list[set] = field(default_factory=list)
    seen: list[dict] = field(default_factory=list)
    scores: PeerScore = None
    record_node_trace: bool = False
    node_trace: list[tuple] = field(default_factory=list)
    next_free: dict = field(default_factory=dict)
    deferred: set = field(default_factory=set)  # ids held back by throttling
    forwards: int = 0

    def __post_init__(self):
        n = len(self.peers)
        if not self.subscriptions:
            self.subscriptions = [set(TOPICS.values()) for _ in range(n)]
        if not self.seen:
            self.seen = [{} for _ in range(n)]
        if self.scores is None:
            cfg = self.cfg
            self.scores = PeerScore(cfg.blacklist_threshold, cfg.spam_penalty, cfg.score_decay)
        self._clock = SlotClock.from_config(self.cfg)
        self._draw = self.cfg.base_latency_dist.bind(self.rng)
        self._extra = self.cfg.extra_delivery_delay_ms

    @property
    def n_nodes(self) -> int:
        return len(self.peers)

    def edges(self) -> set[tuple[int, int]]:
        return {(u, v) for u, ps in enumerate(self.peers) for v in ps if u < v}

    def reached(self, msg_id: int) -> list[NodeId]:
        return [n for n, s in enumerate(self.seen) if msg_id in s]

    def link_blocked(self, a: NodeId, b: NodeId) -> bool:
        sc = self.scores
        return sc.blacklisted(a, b) or sc.blacklisted(b, a)

    def _send(self, frm: NodeId, targets, msg: Message, t: float) -> list[Delivery]:
        out = []
        draw, extra = self._draw, self._extra
        scores = self.scores.scores
        for peer in targets:
            send_at = t
            if scores and self.link_blocked(frm, peer):
                if not self.cfg.throttle_instead_of_blacklist:
                    continue
                key = (frm, peer)
                send_at = max(t, self.next_free.get(key, t))
                if send_at > t:
                    self.deferred.add(msg.id)
                self.next_free[key] = self._clock.slot_start(slot_of(self._clock, send_at) + 1)
            lat = draw() + extra
            out.append(Delivery(send_at + lat, peer, frm, msg, lat))
        self.forwards += 1
        return out


def _connected(peers) -> bool:
    n = len(peers)
    if n == 0:
        return True
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in peers[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def build_mesh(cfg: SimConfig, directory: DiscoveryDirectory, rng: random.Random,
               latency_rng: random.Random | None = None, max_attempts: int = 200) -> MeshState:
    """Random bounded-degree mesh over all directory nodes.

    Every node tries to reach ``min(out_degree, n - 1)`` peers; wiring is
    redrawn until the graph is connected.
    """
    n = directory.n_nodes
    if n != cfg.n_nonTor_nodes:
        raise MeshError("directory does not cover all nodes")
    target = min(cfg.out_degree, n - 1)
    for _ in range(max_attempts):
        adj = [set() for _ in range(n)]
        order = list(range(n))
        rng.shuffle(order)
        for u in order:
            want = target - len(adj[u])
            if want <= 0:
                continue
            pool = [v for v in range(n) if v != u and v not in adj[u] and len(adj[v]) < target]
            for v in rng.sample(pool, min(want, len(pool))):
                adj[u].add(v)
                adj[v].add(u)
        if n == 1 or (all(adj) and _connected(adj)):
            peers = [tuple(sorted(a)) for a in adj]
            return MeshState(cfg, peers, directory, latency_rng or random.Random(rng.random()))
    raise MeshError("mesh construction failed")


def publish(state: MeshState, origin: NodeId, msg: Message, t: float) -> list[Delivery]:
    if msg.topic not in state.subscriptions[origin]:
        raise ValueError(f"node {origin} is not subscribed to {msg.topic}")
    seen = state.seen[origin]
    if msg.id in seen:
        return []
    seen[msg.id] = t
    return state._send(origin, state.peers[origin], msg, t)


def on_receive(state: MeshState, node: NodeId, msg: Message, t: float,
               sender: NodeId | None = None) -> list[Delivery]:
    """Cache and relay a first arrival; duplicates are ignored.

    The transport the message came over is not visible here, so a message
    pushed over Tor is processed exactly like one from a mesh peer.
    """
    seen = state.seen[node]
    if msg.id in seen:
        return []
    seen[msg.id] = t
    subscribed = msg.topic in state.subscriptions[node]
    if state.record_node_trace:
        state.node_trace.append((node, msg.id, msg.kind, msg.topic, msg.seqno, msg.originator,
                                 msg.size, t, "relay" if subscribed else "cache"))
    if not subscribed:
        return []
    return state._send(node, [p for p in state.peers[node] if p != sender], msg, t)


def apply_spam(state: MeshState, scorer: NodeId, spammer: NodeId, count: int) -> float:
    if count < 0:
        raise ValueError("count must be >= 0")
    sc = state.scores
    key = (scorer, spammer)
    sc.scores[key] = sc.scores.get(key, 0.0) + count * sc.penalty
    return sc.scores[key]
