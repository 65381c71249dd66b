"""Deterministic discrete-event engine for Tor-push and direct baseline runs."""

from __future__ import annotations

import bisect
import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from . import gossip, torpush
from .adversary import AdversaryPlan, Observation, compromise_relays
from .latency import LatencyModel, latency  # noqa: F401  (re-exported)
from .metrics import AttestationRecord
from .model import (Duty, MessageFactory, SimConfig, SlotClock, derive_rng, epoch_of,
                    epochs_in_run, iter_duties, slot_of)

MODES = ("torpush", "baseline_direct")

SLOT_START = "slot_start"
EPOCH_PREBUILD = "epoch_prebuild"
DUTY_FIRE = "duty_fire"
DELIVERY = "delivery"
CIRCUIT_REBUILD = "circuit_rebuild"
ADVERSARY_ACTION = "adversary_action"


class Event(NamedTuple):
    fire_time: float
    seq: int
    kind: str
    payload: Any


class EventQueue:
    """Min-heap ordered by ``(fire_time, seq)``; ``seq`` is the insertion counter."""

    def __init__(self):
        self._heap: list[tuple] = []
        self._seq = 0
        self.executed = 0

    def push(self, t: float, kind: str, payload=None):
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def pop(self) -> Event:
        self.executed += 1
        return Event(*heapq.heappop(self._heap))

    def __len__(self):
        return len(self._heap)


def decide_inclusion(arrival: float | None, duty_slot: int, clock: SlotClock,
                     horizon: int = 32) -> int | None:
    """First slot after ``duty_slot`` starting at or after ``arrival``.

    ``None`` (missed) when nothing arrived or inclusion would fall more than
    ``horizon`` slots after the duty.
    """
    if arrival is None:
        return None
    s = math.ceil((arrival - clock.genesis_time) / clock.slot_duration)
    s = max(s, duty_slot + 1)
    if s - duty_slot > horizon:
        return None
    return s


class CircuitEvent(NamedTuple):
    time: float
    event: str
    circuit: str
    detail: str


@dataclass
class Trace:
    cfg: SimConfig
    mode: str
    plan: AdversaryPlan
    records: list[AttestationRecord]
    duties: list[Duty]
    hosts: list[int]
    tor_deliveries: list[torpush.TorDelivery]
    observations: list[Observation]
    circuit_events: list[CircuitEvent]
    endpoints: dict[int, torpush.TorEndpointState]
    mesh: gossip.MeshState
    directory: gossip.DiscoveryDirectory
    relays: torpush.RelaySet
    events_executed: int = 0
    delivery_events: int = 0
    pending_at_stop: int = 0
    first_nodes: dict = field(default_factory=dict)
    dos_windows: list = field(default_factory=list)

    @property
    def clock(self) -> SlotClock:
        return SlotClock.from_config(self.cfg)

    def uses_tor(self, validator: int) -> bool:
        return validator in self.endpoints

    def circuits(self):
        for v in sorted(self.endpoints):
            yield from self.endpoints[v].all_circuits()


def host_of(cfg: SimConfig, validator: int) -> int:
    return validator % cfg.n_nonTor_nodes


class _Run:
    def __init__(self, cfg: SimConfig, plan: AdversaryPlan, mode: str, record_node_trace: bool):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg, self.plan, self.mode = cfg, plan, mode
        self.clock = SlotClock.from_config(cfg)
        seed = cfg.rng_seed
        self.rng_circ = derive_rng(seed, "circuits")
        self.rng_tor_lat = derive_rng(seed, "tor-latency")
        self.rng_jitter = derive_rng(seed, "jitter")
        self.rng_rebuild = derive_rng(seed, "rebuild")

        n = cfg.n_nonTor_nodes
        self.hosts = [host_of(cfg, v) for v in range(cfg.n_validators)]
        tor_validators = range(cfg.n_torpush) if mode == "torpush" else range(0)
        adversary_node = None
        if plan.run_discovery_anomaly:
            adversary_node = plan.adversary_node if plan.adversary_node is not None else n - 1
        # capability flags are only visible when discovery runs in the clear
        flagged = () if cfg.discovery_over_tor else {self.hosts[v] for v in tor_validators}
        self.directory = gossip.DiscoveryDirectory(n, flagged, adversary_node)
        self.mesh = gossip.build_mesh(cfg, self.directory, derive_rng(seed, "mesh"),
                                      derive_rng(seed, "mesh-latency"))
        self.mesh.record_node_trace = record_node_trace
        self.relays = torpush.make_relays(cfg, derive_rng(seed, "relays"))
        compromise_relays(self.relays, plan, derive_rng(seed, "adversary"))

        self.obs: list[Observation] = []
        self.circuit_events: list[CircuitEvent] = []
        self.endpoints: dict[int, torpush.TorEndpointState] = {}
        rng_guard = derive_rng(seed, "guards")
        rng_disc = derive_rng(seed, "discovery")
        for v in tor_validators:
            host = self.hosts[v]
            ep = torpush.TorEndpointState(v, self.directory.addresses[host], cfg.out_degree)
            torpush.init_guards(ep, self.relays, rng_guard, cfg.distinct_guards_per_circuit)
            if cfg.discovery_over_tor:
                requester = self.relays[self.relays.pick(rng_disc)].address
            else:
                requester = ep.address
            banned = {host, *self.mesh.peers[host]}
            pool = set(cfg.receiving_pool)
            ep.candidates = [(e.node, e.port) for e in self.directory.query(requester, 0.0)
                             if e.node not in banned and (not pool or e.node in pool)]
            self.endpoints[v] = ep

        self.q = EventQueue()
        self.factory = MessageFactory()
        self.duties_by_slot: dict[int, list[Duty]] = defaultdict(list)
        self.duties: list[Duty] = []
        for d in iter_duties(cfg):
            self.duties_by_slot[d.slot].append(d)
            self.duties.append(d)
        self.duty_slots = sorted(self.duties_by_slot)
        self.msgs: dict[int, tuple] = {}  # msg id -> (duty, message, via_tor, dropped)
        self.first_arrival: dict[int, float] = {}
        self.first_node: dict[int, int] = {}
        self.tor_deliveries: list[torpush.TorDelivery] = []
        self.delivery_events = 0
        self.down_count: dict[int, int] = defaultdict(int)
        self.last_decay_slot = 0
        self.dos_windows: list[tuple] = []

    # -- setup ---------------------------------------------------------------

    def schedule_initial(self):
        cfg, q = self.cfg, self.q
        for ep in self.endpoints.values():
            self._build(ep, 0, 0.0)
        n_epochs = epochs_in_run(cfg)
        for e in range(n_epochs - 1):
            q.push(self.clock.epoch_start(e) + cfg.epoch_duration / 2, EPOCH_PREBUILD, e + 1)

        plan = self.plan
        self.per_slot_adversary = bool(plan.spam_attack or plan.lowered_scores_attack)
        if self.per_slot_adversary:
            first = 0
        else:
            first = self.duty_slots[0] if self.duty_slots else None
        if first is not None and cfg.n_slots > 0:
            q.push(self.clock.slot_start(first), SLOT_START, first)

        if plan.targeted_guard_dos and self.mode == "torpush":
            victim, lead, outage = plan.targeted_guard_dos
            ep = self.endpoints.get(victim)
            if ep is not None:
                guard = ep.guards[0]
                for d in self.duties:
                    if d.validator != victim:
                        continue
                    start = max(0.0, self.clock.slot_start(d.slot) - lead)
                    self.dos_windows.append((d.slot, d.kind, guard, start, start + outage))
                    q.push(start, ADVERSARY_ACTION, ("relay_down", guard))
                    q.push(start + outage, ADVERSARY_ACTION, ("relay_up", guard))

    def _build(self, ep, epoch, t):
        if not ep.candidates:
            return
        torpush.build_epoch_circuits(ep, self.relays, ep.candidates, epoch, self.rng_circ)
        for c in ep.circuits[epoch]:
            self.circuit_events.append(CircuitEvent(t, "built", c.id, c.state))
            if c.state == torpush.FAILED:
                self._schedule_rebuild(ep, c, t)

    def _schedule_rebuild(self, ep, circ, t):
        done = torpush.on_circuit_failure(ep, circ, t, self.cfg, self.rng_rebuild)
        self.q.push(done, CIRCUIT_REBUILD, (ep.owner, circ))

    # -- main loop -----------------------------------------------------------

    def run(self):
        self.schedule_initial()
        q = self.q
        mesh = self.mesh
        on_receive = gossip.on_receive
        hosts = self.hosts
        first_arrival = self.first_arrival
        first_node = self.first_node
        heap = q._heap
        heappop, heappush = heapq.heappop, heapq.heappush
        while heap:
            t, _, kind, payload = heappop(heap)
            q.executed += 1
            if kind == DELIVERY:
                to, frm, msg = payload
                self.delivery_events += 1
                fwd = on_receive(mesh, to, msg, t, frm)
                # a receiving node that can relay to nobody is not a way into the mesh
                if msg.originator is not None and to != hosts[msg.originator] and (fwd or frm is not None):
                    prev = first_arrival.get(msg.id)
                    if prev is None or t < prev:
                        first_arrival[msg.id] = t
                        first_node[msg.id] = to
                if fwd:
                    seq = q._seq
                    for d in fwd:
                        heappush(heap, (d.time, seq, DELIVERY, (d.to, d.frm, d.msg)))
                        seq += 1
                    q._seq = seq
            elif kind == DUTY_FIRE:
                self._duty(t, payload)
            elif kind == SLOT_START:
                self._slot(t, payload)
            elif kind == EPOCH_PREBUILD:
                for v in sorted(self.endpoints):
                    self._build(self.endpoints[v], payload, t)
            elif kind == CIRCUIT_REBUILD:
                self._rebuild(t, *payload)
            elif kind == ADVERSARY_ACTION:
                self._adversary(t, *payload)
        return self

    def _slot(self, t, slot):
        cfg = self.cfg
        scores = self.mesh.scores
        if slot > self.last_decay_slot:
            if scores.scores:
                scores.decay(slot - self.last_decay_slot)
            self.last_decay_slot = slot
        if self.per_slot_adversary:
            self._score_attack(slot)
        for duty in self.duties_by_slot.get(slot, ()):
            jitter = self.rng_jitter.uniform(0.0, cfg.duty_jitter_ms) if cfg.duty_jitter_ms else 0.0
            self.q.push(t + jitter, DUTY_FIRE, duty)
        if self.per_slot_adversary:
            nxt = slot + 1
        else:
            i = bisect.bisect_right(self.duty_slots, slot)
            nxt = self.duty_slots[i] if i < len(self.duty_slots) else cfg.n_slots
        if nxt < cfg.n_slots:
            self.q.push(self.clock.slot_start(nxt), SLOT_START, nxt)

    def _score_attack(self, slot):
        mesh, plan = self.mesh, self.plan
        if plan.spam_attack:
            target, count = plan.spam_attack
            for peer in mesh.peers[target]:
                gossip.apply_spam(mesh, peer, target, count)
        sc = mesh.scores
        for target in plan.lowered_scores_attack:
            for peer in mesh.peers[target]:
                deficit = sc.score(peer, target) - sc.threshold
                if deficit >= 0:
                    gossip.apply_spam(mesh, peer, target, int(deficit // -sc.penalty) + 1)

    def _duty(self, t, duty: Duty):
        cfg = self.cfg
        msg = self.factory.data(duty.kind, duty.validator, duty.slot,
                                cfg.msg_size_table[duty.kind], t)
        ep = self.endpoints.get(duty.validator)
        if ep is None:
            self.msgs[msg.id] = (duty, msg, False, False)
            host = self.hosts[duty.validator]
            for d in gossip.publish(self.mesh, host, msg, t):
                self.q.push(d.time, DELIVERY, (d.to, d.frm, d.msg))
            return
        epoch = epoch_of(self.clock, t)
        deliveries = torpush.push(ep, msg, t, epoch, cfg, self.rng_tor_lat)
        self.msgs[msg.id] = (duty, msg, True, not deliveries)
        directory = self.directory
        for d in deliveries:
            self.tor_deliveries.append(d)
            guard = self.relays[d.guard]
            if guard.compromised:
                self.obs.append(Observation("guard", d.guard, t, ep.address, msg.id, f"slot={duty.slot}"))
            if self.relays[d.exit].compromised:
                self.obs.append(Observation("exit", d.exit, d.arrival, self.relays[d.exit].address,
                                            msg.id, f"{directory.addresses[d.to]}:{d.port}"))
            if directory.adversarial and d.to == directory.adversary_node:
                self.obs.append(Observation("node", d.to, d.arrival, self.relays[d.exit].address,
                                            msg.id, f"port={d.port}"))
            self.q.push(d.arrival, DELIVERY, (d.to, None, msg))

    def _rebuild(self, t, owner, circ):
        ep = self.endpoints[owner]
        if circ.built_for_epoch < epoch_of(self.clock, t) or circ.state == torpush.READY:
            return
        ok = torpush.rebuild(circ, self.relays, self.rng_circ)
        self.circuit_events.append(CircuitEvent(t, "rebuilt" if ok else "rebuild_failed", circ.id,
                                                circ.state))
        if not ok:
            self._schedule_rebuild(ep, circ, t)

    def _adversary(self, t, action, relay_id):
        if action == "relay_down":
            self.down_count[relay_id] += 1
            if self.down_count[relay_id] == 1:
                self.relays.set_online(relay_id, False)
                current = epoch_of(self.clock, t)
                for ep, circ in list(torpush.circuits_using(
                        [self.endpoints[v] for v in sorted(self.endpoints)], relay_id, current)):
                    self.circuit_events.append(CircuitEvent(t, "failed", circ.id, f"relay={relay_id}"))
                    self._schedule_rebuild(ep, circ, t)
        elif action == "relay_up":
            self.down_count[relay_id] -= 1
            if self.down_count[relay_id] == 0:
                self.relays.set_online(relay_id, True)

    # -- results -------------------------------------------------------------

    def trace(self) -> Trace:
        cfg = self.cfg
        records = []
        reach_count: dict[int, int] = defaultdict(int)
        for seen in self.mesh.seen:
            for mid in seen:
                reach_count[mid] += 1
        for mid in sorted(self.msgs):
            duty, msg, via_tor, dropped = self.msgs[mid]
            arrival = self.first_arrival.get(mid)
            horizon = 1 if duty.kind == "block_proposal" else cfg.inclusion_horizon
            records.append(AttestationRecord(
                validator=duty.validator, duty_slot=duty.slot,
                actual_inclusion_slot=decide_inclusion(arrival, duty.slot, self.clock, horizon),
                created_at=msg.created_at, first_mesh_arrival=arrival, via_tor=via_tor,
                kind=duty.kind, msg_id=mid, first_node=self.first_node.get(mid),
                dropped=dropped, reach=reach_count.get(mid, 0)))
        return Trace(cfg, self.mode, self.plan, records, self.duties, self.hosts,
                     self.tor_deliveries, self.obs, self.circuit_events, self.endpoints,
                     self.mesh, self.directory, self.relays, self.q.executed,
                     self.delivery_events, len(self.q), dict(self.first_node), self.dos_windows)


def run(cfg: SimConfig, plan: AdversaryPlan | None = None, mode: str = "torpush",
        record_node_trace: bool = False) -> Trace:
    """Simulate ``cfg.n_slots`` slots and drain all in-flight deliveries.

    The trace is a pure function of ``(cfg, plan, mode)``; ``cfg.rng_seed``
    keys every random stream.
    """
    return _Run(cfg, plan or AdversaryPlan(), mode, record_node_trace).run().trace()
