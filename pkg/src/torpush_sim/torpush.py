"""Tor-push endpoint: guard selection, per-epoch circuit construction and
push-only delivery of validator data messages."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .latency import TOR_HOPS, latency, sample_model
from .model import Message, NodeId, RelayId, SimConfig, ValidatorId

BUILDING, READY, FAILED = "building", "ready", "failed"


class TorPushError(RuntimeError):
    pass


@dataclass
class Relay:
    id: RelayId
    advertised_bandwidth: float
    measured_bandwidth: float
    is_guard_eligible: bool = True
    compromised: bool = False
    online: bool = True

    def weight(self, verify: bool) -> float:
        return self.measured_bandwidth if verify else self.advertised_bandwidth

    @property
    def address(self) -> str:
        return f"relay-{self.id}"


class RelaySet:
    """Relay list with cached cumulative weights for bandwidth-weighted draws.

    Call :meth:`set_online` rather than flipping ``Relay.online`` directly so
    the cached tables are invalidated.
    """

    def __init__(self, relays: Sequence[Relay], verify_bandwidth: bool = False):
        self.relays = list(relays)
        self.by_id = {r.id: r for r in self.relays}
        self.verify = verify_bandwidth
        self._tables: dict[bool, tuple[list, list]] = {}

    def __iter__(self):
        return iter(self.relays)

    def __len__(self):
        return len(self.relays)

    def __getitem__(self, relay_id: RelayId) -> Relay:
        return self.by_id[relay_id]

    def set_online(self, relay_id: RelayId, online: bool):
        self.by_id[relay_id].online = online
        self._tables.clear()

    def invalidate(self):
        self._tables.clear()

    def n_online(self) -> int:
        return sum(r.online for r in self.relays)

    def _table(self, guards_only: bool):
        tab = self._tables.get(guards_only)
        if tab is None:
            ids, cum, total = [], [], 0.0
            for r in self.relays:
                if not r.online or (guards_only and not r.is_guard_eligible):
                    continue
                w = r.weight(self.verify)
                if w <= 0:
                    continue
                total += w
                ids.append(r.id)
                cum.append(total)
            tab = self._tables[guards_only] = (ids, cum)
        return tab

    def pick(self, rng: random.Random, exclude=(), guards_only: bool = False) -> RelayId | None:
        """Bandwidth-weighted draw among online relays not in ``exclude``.

        Rejection against ``exclude`` gives the same law as renormalising the
        weights over the remaining relays.
        """
        ids, cum = self._table(guards_only)
        if not ids or all(i in exclude for i in ids):
            return None
        total = cum[-1]
        while True:
            k = bisect.bisect_right(cum, rng.random() * total)
            rid = ids[min(k, len(ids) - 1)]
            if rid not in exclude:
                return rid


def _as_set(relays) -> RelaySet:
    return relays if isinstance(relays, RelaySet) else RelaySet(relays)


def make_relays(cfg: SimConfig, rng: random.Random) -> RelaySet:
    relays = []
    for i in range(cfg.n_tor_relays):
        bw = cfg.relay_bandwidth_dist.sample(rng)
        relays.append(Relay(i, bw, bw))
    return RelaySet(relays, cfg.verify_bandwidth)


def select_guard(relays, rng: random.Random) -> RelayId:
    rid = _as_set(relays).pick(rng, guards_only=True)
    if rid is None:
        raise TorPushError("guard selection impossible")
    return rid


def select_distinct_guards(relays, count: int, rng: random.Random) -> list[RelayId]:
    rs = _as_set(relays)
    chosen: list[RelayId] = []
    while len(chosen) < count:
        rid = rs.pick(rng, exclude=chosen, guards_only=True)
        if rid is None:
            break
        chosen.append(rid)
    if not chosen:
        raise TorPushError("guard selection impossible")
    return chosen


@dataclass
class Circuit:
    guard: RelayId
    middle: RelayId | None
    exit: RelayId | None
    built_for_epoch: int
    receiving_node: NodeId
    receiving_port: int = 9000
    state: str = BUILDING
    slot: int = 0
    owner: ValidatorId = 0

    @property
    def id(self) -> str:
        return f"{self.owner}:{self.built_for_epoch}:{self.slot}"

    @property
    def relays(self) -> tuple:
        return (self.guard, self.middle, self.exit)

    def uses(self, relay_id: RelayId) -> bool:
        return relay_id in self.relays


class TorDelivery(NamedTuple):
    msg_id: int
    validator: ValidatorId
    epoch: int
    circuit: str
    guard: RelayId
    middle: RelayId
    exit: RelayId
    to: NodeId
    port: int
    sent_at: float
    l_base: float
    l_hop: float
    n_hops: int
    s_msg: float
    c_bw: float
    extra_delay: float
    arrival: float


@dataclass
class TorEndpointState:
    """Tor connection endpoint of one validator.

    It owns no mesh state: it never subscribes and learns receiving nodes
    only through its own directory lookup (``candidates``).
    """

    owner: ValidatorId
    address: str
    out_degree: int
    guards: list[RelayId] = field(default_factory=list)
    circuits: dict[int, list[Circuit]] = field(default_factory=dict)
    candidates: list[tuple[NodeId, int]] = field(default_factory=list)
    current_epoch: int = 0
    contacted: set = field(default_factory=set)
    subscriptions: frozenset = frozenset()

    def ready_circuits(self, epoch: int) -> list[Circuit]:
        return [c for c in self.circuits.get(epoch, ()) if c.state == READY]

    def all_circuits(self):
        for epoch in sorted(self.circuits):
            yield from self.circuits[epoch]


def init_guards(ep: TorEndpointState, relays, rng: random.Random, distinct: bool) -> list[RelayId]:
    """Pick the run-lifetime guard(s) of an endpoint."""
    if distinct:
        ep.guards = select_distinct_guards(relays, ep.out_degree, rng)
    else:
        ep.guards = [select_guard(relays, rng)]
    return ep.guards


def _fill_path(circ: Circuit, rs: RelaySet, rng: random.Random) -> bool:
    if not rs[circ.guard].online or rs.n_online() < 3:
        circ.state = FAILED
        return False
    middle = rs.pick(rng, exclude=(circ.guard,))
    exit_ = rs.pick(rng, exclude=(circ.guard, middle)) if middle is not None else None
    if exit_ is None:
        circ.state = FAILED
        return False
    circ.middle, circ.exit = middle, exit_
    circ.state = READY
    return True


def build_epoch_circuits(ep: TorEndpointState, relays, candidates: Sequence, epoch: int,
                         rng: random.Random) -> TorEndpointState:
    """Build ``out_degree`` circuits to be used during ``epoch``.

    ``candidates`` are receiving nodes, either bare node ids or
    ``(node, port)`` pairs from a directory lookup.
    """
    rs = _as_set(relays)
    if not candidates:
        raise TorPushError("no receiving candidates")
    if not ep.guards:
        raise TorPushError("endpoint has no guard")
    cands = [c if isinstance(c, tuple) else (c, 9000) for c in candidates]
    d = ep.out_degree
    if len(cands) >= d:
        bound = rng.sample(cands, d)
    else:
        order = list(cands)
        rng.shuffle(order)
        bound = [order[i % len(order)] for i in range(d)]
    circuits = []
    for i, (node, port) in enumerate(bound):
        guard = ep.guards[i % len(ep.guards)]
        circ = Circuit(guard, None, None, epoch, node, port, slot=i, owner=ep.owner)
        _fill_path(circ, rs, rng)
        circuits.append(circ)
    ep.circuits[epoch] = circuits
    return ep


def push(ep: TorEndpointState, msg: Message, t: float, epoch: int, cfg: SimConfig,
         rng: random.Random) -> list[TorDelivery]:
    """One delivery per ready circuit of ``epoch`` towards its receiving node."""
    if not msg.is_data:
        raise TorPushError("control over Tor forbidden")
    out = []
    extra = cfg.extra_delivery_delay_ms
    for circ in ep.ready_circuits(epoch):
        m = sample_model(cfg, msg.size, rng, TOR_HOPS)
        arrival = t + latency(m) + extra
        ep.contacted.add(circ.receiving_node)
        out.append(TorDelivery(msg.id, ep.owner, epoch, circ.id, circ.guard, circ.middle, circ.exit,
                               circ.receiving_node, circ.receiving_port, t,
                               m.l_base, m.l_hop, m.n_hops, m.s_msg, m.c_bw, extra, arrival))
    return out


def rebuild_delay(cfg: SimConfig, rng: random.Random) -> float:
    """Uniform on ``(rebuild_min_ms, circuit_build_timeout]``."""
    lo, hi = cfg.rebuild_min_ms, cfg.circuit_build_timeout
    return hi - rng.random() * (hi - lo)


def on_circuit_failure(ep: TorEndpointState, circuit: Circuit, t: float, cfg: SimConfig,
                       rng: random.Random) -> float:
    """Mark ``circuit`` failed and return the time its rebuild completes."""
    circuit.state = FAILED
    return t + rebuild_delay(cfg, rng)


def rebuild(circuit: Circuit, relays, rng: random.Random) -> bool:
    """Retry a failed circuit on its original guard; fails while that guard is down."""
    circuit.state = BUILDING
    return _fill_path(circuit, _as_set(relays), rng)


def circuits_using(endpoints, relay_id: RelayId, min_epoch: int = 0):
    for ep in endpoints:
        for epoch, circuits in ep.circuits.items():
            if epoch < min_epoch:
                continue
            for c in circuits:
                if c.state == READY and c.uses(relay_id):
                    yield ep, c
