"""Adversary models: relay compromise, deanonymization analyzers and the
liveness / reputation attacks, each evaluated against engine traces."""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, NamedTuple

from .model import ConfigError, SimConfig, slot_of

if TYPE_CHECKING:
    from .engine import Trace


@dataclass(frozen=True)
class AdversaryPlan:
    compromised_guard_fraction: float = 0.0
    compromised_network_fraction: float = 0.0
    targeted_guard_dos: tuple | None = None  # (victim, lead_ms, outage_ms)
    run_discovery_anomaly: bool = False
    adversary_node: int | None = None
    spam_attack: tuple | None = None  # (target node, spam count per slot)
    lowered_scores_attack: tuple = ()
    advertised_bandwidth_inflation: float = 1.0

    def __post_init__(self):
        for name in ("compromised_guard_fraction", "compromised_network_fraction"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.advertised_bandwidth_inflation < 1:
            raise ConfigError("advertised_bandwidth_inflation must be >= 1")


PLAN_KEYS = tuple(AdversaryPlan.__dataclass_fields__)


def parse_plan_value(key: str, text: str):
    if key not in PLAN_KEYS:
        raise ConfigError(f"unknown adversary key {key!r}")
    text = text.strip()
    try:
        if key in ("compromised_guard_fraction", "compromised_network_fraction",
                   "advertised_bandwidth_inflation"):
            return float(text)
        if key == "run_discovery_anomaly":
            return text.lower() in ("1", "true", "yes", "on")
        if key == "adversary_node":
            return None if text.lower() in ("", "none") else int(text)
        if key == "targeted_guard_dos":
            if text.lower() in ("", "none"):
                return None
            victim, lead, outage = (x.strip() for x in text.split(","))
            return (int(victim), float(lead), float(outage))
        if key == "spam_attack":
            if text.lower() in ("", "none"):
                return None
            node, count = (x.strip() for x in text.split(","))
            return (int(node), int(count))
        if key == "lowered_scores_attack":
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported key {key!r}")


class Observation(NamedTuple):
    """One row logged by an adversarial observer."""

    role: str  # guard | exit | node
    observer: int
    time: float
    source: str
    msg_id: int
    detail: str = ""


class DeanonVerdict(NamedTuple):
    victim: int
    identified: bool
    mechanism: str  # guard_only | entry_exit | discovery_anomaly | rollout_set
    evidence: tuple = ()
    claimed_address: str | None = None


def compromise_relays(relays, plan: AdversaryPlan, rng: random.Random) -> list[int]:
    """Hand the adversary relays worth exactly the planned bandwidth share.

    A random subset is marked compromised and bandwidths are rescaled so it
    holds fraction ``g`` (guard plan) or else ``f`` (network plan) of the
    total. Compromised relays then advertise ``inflation`` times their
    measured bandwidth.
    """
    fraction = plan.compromised_guard_fraction or plan.compromised_network_fraction
    if fraction <= 0:
        return []
    pool = [r for r in relays if r.is_guard_eligible]
    k = min(len(pool) - 1, max(1, round(fraction * len(pool))))
    chosen = rng.sample(pool, k)
    chosen_ids = {r.id for r in chosen}
    total = math.fsum(r.measured_bandwidth for r in pool)
    bad = math.fsum(r.measured_bandwidth for r in chosen)
    for r in pool:
        if r.id in chosen_ids:
            r.compromised = True
            r.measured_bandwidth *= fraction * total / bad
            r.advertised_bandwidth = r.measured_bandwidth * plan.advertised_bandwidth_inflation
        else:
            r.measured_bandwidth *= (1 - fraction) * total / (total - bad)
            r.advertised_bandwidth = r.measured_bandwidth
    if hasattr(relays, "invalidate"):
        relays.invalidate()
    return sorted(chosen_ids)


def _msg_index(trace: "Trace") -> dict:
    return {r.msg_id: r for r in trace.records}


def _schedule_consistent(trace: "Trace", rec, t: float) -> bool:
    # the burst must fall inside the publicly scheduled duty slot
    return slot_of(trace.clock, t) == rec.duty_slot


# ---------------------------------------------------------------------------
# deanonymization analyzers
# ---------------------------------------------------------------------------


def guard_only_attack(trace: "Trace", plan: AdversaryPlan | None = None) -> list[DeanonVerdict]:
    """Link validators to addresses via compromised guards plus the public schedule.

    A compromised guard logs the connecting address of every pushed message
    it carries; the gossip network reveals who signed that message. Exit
    control is not needed.
    """
    index = _msg_index(trace)
    evidence: dict[int, list[int]] = defaultdict(list)
    claimed: dict[int, str] = {}
    for i, row in enumerate(trace.observations):
        if row.role != "guard":
            continue
        rec = index.get(row.msg_id)
        if rec is None or not _schedule_consistent(trace, rec, row.time):
            continue
        evidence[rec.validator].append(i)
        claimed.setdefault(rec.validator, row.source)
    return [DeanonVerdict(v, bool(evidence[v]), "guard_only", tuple(evidence[v]), claimed.get(v))
            for v in sorted(trace.endpoints)]


def circuit_compromised(circuit, relays) -> bool:
    return (circuit.exit is not None and relays[circuit.guard].compromised
            and relays[circuit.exit].compromised)


def entry_exit_rate(circuits: Iterable, relays) -> float:
    n = hits = 0
    for c in circuits:
        if c.middle is None:
            continue
        n += 1
        hits += circuit_compromised(c, relays)
    return hits / n if n else 0.0


def entry_exit_attack(trace: "Trace", plan: AdversaryPlan | None = None) -> float:
    """Fraction of built circuits whose guard and exit are both compromised."""
    return entry_exit_rate(trace.circuits(), trace.relays)


def attribute_connection(directory, port: int) -> str | None:
    """Requester address a connection on ``port`` is linked to, if any."""
    return directory.requester_for_port(port) if directory.adversarial else None


def discovery_connect_anomaly(trace: "Trace", plan: AdversaryPlan | None = None) -> list[DeanonVerdict]:
    """Verdicts from a discovery node that hands each requester a unique port."""
    index = _msg_index(trace)
    found: dict[int, tuple[list[int], str]] = {}
    for i, row in enumerate(trace.observations):
        if row.role != "node" or not row.detail.startswith("port="):
            continue
        rec = index.get(row.msg_id)
        requester = attribute_connection(trace.directory, int(row.detail[5:]))
        if rec is None or requester is None:
            continue
        if requester != trace.endpoints[rec.validator].address:
            continue
        rows, _ = found.setdefault(rec.validator, ([], requester))
        rows.append(i)
    out = []
    for v in sorted(trace.endpoints):
        rows, addr = found.get(v, ([], None))
        out.append(DeanonVerdict(v, bool(rows), "discovery_anomaly", tuple(rows), addr))
    return out


class AnonymitySet(NamedTuple):
    size: int
    entropy_bits: float | None
    members: tuple
    note: str = ""


def rollout_anonymity_set(directory, trace: "Trace") -> AnonymitySet:
    """Plausible originators of Tor-pushed messages given the discovery leak."""
    cfg = trace.cfg
    if cfg.discovery_over_tor:
        members = tuple(range(cfg.n_validators))
    else:
        members = tuple(v for v in range(cfg.n_validators)
                        if directory.torpush_capable[trace.hosts[v]])
    k = len(members)
    if k == 0:
        return AnonymitySet(0, None, (), "no torpush users")
    return AnonymitySet(k, math.log2(k), members)


def verify_verdict(trace: "Trace", verdict: DeanonVerdict) -> bool:
    """True iff an identified verdict's evidence reconstructs the real linkage."""
    if not verdict.identified:
        return True
    if not verdict.evidence:
        return False
    index = _msg_index(trace)
    real = trace.endpoints[verdict.victim].address
    for i in verdict.evidence:
        row = trace.observations[i]
        rec = index[row.msg_id]
        if rec.validator != verdict.victim:
            return False
        if verdict.mechanism == "guard_only":
            if row.source != real or not _schedule_consistent(trace, rec, row.time):
                return False
        elif verdict.claimed_address != real:
            return False
    return True


def guard_offset_profile(trace: "Trace") -> dict[int, list[float]]:
    """Per victim, offsets (ms) of guard-observed bursts after slot start."""
    index = _msg_index(trace)
    clock = trace.clock
    out: dict[int, list[float]] = defaultdict(list)
    for row in trace.observations:
        if row.role == "guard":
            out[index[row.msg_id].validator].append(row.time - clock.slot_start(slot_of(clock, row.time)))
    return dict(out)


def circuit_timing_series(trace: "Trace") -> dict[str, list[float]]:
    """Send times of pushed messages per circuit, for external fingerprinting analysis."""
    out: dict[str, list[float]] = defaultdict(list)
    for d in trace.tor_deliveries:
        out[d.circuit].append(d.sent_at)
    return dict(out)


# ---------------------------------------------------------------------------
# liveness and reputation attacks (drive a run)
# ---------------------------------------------------------------------------


def _runner(runner):
    if runner is None:
        from .engine import run
        return run
    return runner


@dataclass
class DosReport:
    victim: int
    guard: int | None
    duties: list = field(default_factory=list)  # (slot, kind, missed)

    @property
    def miss_rate(self) -> float:
        return sum(m for _, _, m in self.duties) / len(self.duties) if self.duties else 0.0


def targeted_guard_dos(cfg: SimConfig, plan: AdversaryPlan, runner: Callable | None = None,
                       trace: "Trace" | None = None) -> DosReport:
    """Take the victim's guard offline around each of its duties and report misses."""
    if not plan.targeted_guard_dos:
        raise ValueError("plan has no targeted_guard_dos")
    if trace is None:
        trace = _runner(runner)(cfg, plan, "torpush")
    victim = plan.targeted_guard_dos[0]
    ep = trace.endpoints.get(victim)
    report = DosReport(victim, ep.guards[0] if ep else None)
    outcome = {(r.duty_slot, r.kind): r.missed for r in trace.records if r.validator == victim}
    for slot, kind, *_ in trace.dos_windows:
        report.duties.append((slot, kind, outcome[(slot, kind)]))
    return report


def discovery_anomaly_run(cfg: SimConfig, plan: AdversaryPlan, runner: Callable | None = None):
    trace = _runner(runner)(cfg, plan, "torpush")
    return discovery_connect_anomaly(trace, plan), trace


@dataclass
class PropagationReport:
    targets: tuple
    pushed: int = 0
    blocked: int = 0
    delayed: int = 0
    affected_validators: tuple = ()
    blocked_ids: tuple = ()


def propagation_report(trace: "Trace", targets: Iterable[int]) -> PropagationReport:
    """Count Tor-pushed messages that never left the targeted receiving nodes
    and those that throttling held back on the way out."""
    targets = tuple(sorted(set(targets)))
    tset = set(targets)
    reached: dict[int, set] = defaultdict(set)
    for node, seen in enumerate(trace.mesh.seen):
        for mid in seen:
            reached[mid].add(node)
    rep = PropagationReport(targets)
    blocked, affected = [], set()
    deferred = trace.mesh.deferred
    for rec in trace.records:
        if not rec.via_tor or rec.dropped:
            continue
        rep.pushed += 1
        if reached[rec.msg_id] <= tset:
            blocked.append(rec.msg_id)
            affected.add(rec.validator)
        elif rec.msg_id in deferred:
            rep.delayed += 1
    rep.blocked = len(blocked)
    rep.blocked_ids = tuple(blocked)
    rep.affected_validators = tuple(sorted(affected))
    return rep


def peer_score_attack(cfg: SimConfig, plan: AdversaryPlan, runner: Callable | None = None,
                      trace: "Trace" | None = None) -> PropagationReport:
    """Drive receiving nodes below the blacklist threshold and measure fate-sharing."""
    targets = list(plan.lowered_scores_attack)
    if plan.spam_attack:
        targets.append(plan.spam_attack[0])
    if trace is None:
        trace = _runner(runner)(cfg, plan, "torpush")
    return propagation_report(trace, targets)
