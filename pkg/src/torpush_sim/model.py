"""Core domain types: scenario configuration, the slot clock, messages and
the public duty schedule."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import random
import re
from dataclasses import dataclass, field
from typing import Iterable

DATA_KINDS = ("attestation", "aggregation", "block_proposal")
CONTROL_KINDS = ("control_graft", "control_prune", "control_ihave")
MESSAGE_KINDS = DATA_KINDS + CONTROL_KINDS

TOPICS = {
    "attestation": "beacon_attestation",
    "aggregation": "beacon_aggregate_and_proof",
    "block_proposal": "beacon_block",
}

SHUFFLE_ROUND_COUNT = 10


class ConfigError(ValueError):
    """Raised for malformed or out-of-range scenario configuration."""


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

_DIST_RE = re.compile(r"^\s*([a-z_]+)\s*\(([^)]*)\)\s*$")
_DIST_ARITY = {"constant": 1, "uniform": 2, "normal": 2, "exponential": 1}


@dataclass(frozen=True)
class Dist:
    """A strictly positive scalar distribution.

    ``normal`` is truncated at zero by resampling, ``exponential`` takes a
    rate (mean ``1/rate``).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in _DIST_ARITY:
            raise ConfigError(f"unknown distribution {self.kind!r}")
        if len(self.params) != _DIST_ARITY[self.kind]:
            raise ConfigError(f"{self.kind} takes {_DIST_ARITY[self.kind]} parameter(s)")
        p = self.params
        if self.kind == "constant" and not p[0] > 0:
            raise ConfigError("constant distribution must be > 0")
        if self.kind == "uniform" and not (0 <= p[0] < p[1]):
            raise ConfigError("uniform(a,b) needs 0 <= a < b")
        if self.kind == "normal" and (p[1] < 0 or (p[1] == 0 and p[0] <= 0)):
            raise ConfigError("normal(mu,sigma) needs sigma >= 0 and positive support")
        if self.kind == "exponential" and not p[0] > 0:
            raise ConfigError("exponential rate must be > 0")

    @classmethod
    def parse(cls, text: str) -> "Dist":
        m = _DIST_RE.match(text)
        if not m:
            try:
                return cls("constant", (float(text),))
            except ValueError:
                raise ConfigError(f"cannot parse distribution {text!r}") from None
        try:
            params = tuple(float(x) for x in m.group(2).split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"cannot parse distribution {text!r}") from None
        return cls(m.group(1), params)

    def sample(self, rng: random.Random) -> float:
        kind, p = self.kind, self.params
        if kind == "constant":
            return p[0]
        while True:
            if kind == "uniform":
                x = rng.uniform(p[0], p[1])
            elif kind == "normal":
                x = rng.gauss(p[0], p[1])
            else:
                x = rng.expovariate(p[0])
            if x > 0:
                return x

    def bind(self, rng: random.Random):
        """Zero-argument sampler drawing from ``rng``; same stream as :meth:`sample`."""
        kind, p = self.kind, self.params
        if kind == "constant":
            c = p[0]
            return lambda: c
        if kind == "normal":
            mu, sigma = p
            gauss = rng.gauss

            def draw():
                x = gauss(mu, sigma)
                while x <= 0:
                    x = gauss(mu, sigma)
                return x
            return draw
        return lambda: self.sample(rng)

    @property
    def mean(self) -> float:
        """Mean of the untruncated distribution."""
        kind, p = self.kind, self.params
        if kind == "constant":
            return p[0]
        if kind == "uniform":
            return (p[0] + p[1]) / 2
        if kind == "normal":
            return p[0]
        return 1.0 / p[0]

    def __str__(self):
        return f"{self.kind}({','.join(_fmt_num(x) for x in self.params)})"


def _fmt_num(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(x)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULT_MSG_SIZES = {"attestation": 288, "aggregation": 500, "block_proposal": 120_000}


@dataclass(frozen=True)
class SimConfig:
    n_nonTor_nodes: int = 50
    n_tor_relays: int = 100
    n_validators: int = 10
    out_degree: int = 8
    slot_duration: float = 12_000.0
    epoch_duration: float = 600_000.0
    circuit_build_timeout: float = 60_000.0
    base_latency_dist: Dist = Dist("normal", (863.51, 150.0))
    hop_latency_dist: Dist = Dist("normal", (75.0, 20.0))
    bandwidth_dist: Dist = Dist("constant", (21.6,))
    relay_bandwidth_dist: Dist = Dist("exponential", (1 / 5000,))
    msg_size_table: dict = field(default_factory=lambda: dict(DEFAULT_MSG_SIZES))
    rng_seed: int = 0
    discovery_over_tor: bool = False
    distinct_guards_per_circuit: bool = False
    # run shape
    n_slots: int = 600
    network_validators: int = 0  # 0: same as n_validators
    aggregator_modulo: int = 0  # 0: no aggregation duties
    torpush_validators: int = -1  # -1: every validator uses Tor push
    duty_jitter_ms: float = 1000.0
    inclusion_horizon: int = 32
    extra_delivery_delay_ms: float = 0.0
    rebuild_min_ms: float = 10_000.0
    verify_bandwidth: bool = False
    receiving_pool: tuple = ()
    # peer scoring
    blacklist_threshold: float = -100.0
    spam_penalty: float = -10.0
    score_decay: float = 0.99
    throttle_instead_of_blacklist: bool = False

    def __post_init__(self):
        if self.n_tor_relays < 3:
            raise ConfigError("n_tor_relays must be >= 3")
        if self.n_nonTor_nodes < 1:
            raise ConfigError("n_nonTor_nodes must be >= 1")
        if self.n_validators < 0:
            raise ConfigError("n_validators must be >= 0")
        if self.out_degree < 1:
            raise ConfigError("out_degree must be >= 1")
        if not self.slot_duration > 0:
            raise ConfigError("slot_duration must be > 0")
        if self.epoch_duration < self.slot_duration:
            raise ConfigError("epoch_duration must be >= slot_duration")
        if self.circuit_build_timeout <= self.rebuild_min_ms:
            raise ConfigError("circuit_build_timeout must exceed rebuild_min_ms")
        if self.n_slots < 0 or self.inclusion_horizon < 1:
            raise ConfigError("n_slots must be >= 0 and inclusion_horizon >= 1")
        if not 0 < self.score_decay <= 1:
            raise ConfigError("score_decay must lie in (0, 1]")
        if self.duty_jitter_ms < 0 or self.extra_delivery_delay_ms < 0:
            raise ConfigError("jitter and extra delay must be >= 0")
        for kind in DATA_KINDS:
            if self.msg_size_table.get(kind, 0) <= 0:
                raise ConfigError(f"msg_size_table needs a positive size for {kind}")

    @property
    def slots_per_epoch(self) -> int:
        return max(1, int(self.epoch_duration // self.slot_duration))

    @property
    def n_torpush(self) -> int:
        if self.torpush_validators < 0:
            return self.n_validators
        return min(self.torpush_validators, self.n_validators)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_size_table(text: str) -> dict:
    table = dict(DEFAULT_MSG_SIZES)
    for item in text.split(","):
        if not item.strip():
            continue
        kind, _, size = item.partition(":")
        kind = kind.strip()
        if kind not in DATA_KINDS:
            raise ConfigError(f"unknown message kind in msg_size_table: {kind!r}")
        table[kind] = int(size)
    return table


def parse_value(key: str, text: str):
    """Convert the textual value of a SimConfig key to its field type."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if key.endswith("_dist"):
            return Dist.parse(text)
        if key == "msg_size_table":
            return _parse_size_table(text)
        if key == "receiving_pool":
            return tuple(int(x) for x in text.split(",") if x.strip())
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    raise ConfigError(f"unsupported key {key!r}")


def parse_kv_text(text: str) -> dict[str, str]:
    """Split a ``key = value`` document into raw strings, ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def config_from_mapping(raw: dict[str, str], base: SimConfig | None = None) -> SimConfig:
    base = base or SimConfig()
    values = {key: parse_value(key, text) for key, text in raw.items()}
    return base.replace(**values)


def load_config(text: str) -> SimConfig:
    """Parse a flat config document; unknown keys are an error."""
    return config_from_mapping(parse_kv_text(text))


def dump_config(cfg: SimConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, dict):
            value = ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Clock, ids, messages
# ---------------------------------------------------------------------------

NodeId = int
RelayId = int
ValidatorId = int


@dataclass(frozen=True)
class SlotClock:
    genesis_time: float = 0.0
    slot_duration: float = 12_000.0
    epoch_duration: float = 600_000.0

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "SlotClock":
        return cls(0.0, cfg.slot_duration, cfg.epoch_duration)

    def slot_start(self, slot: int) -> float:
        return self.genesis_time + slot * self.slot_duration

    def epoch_start(self, epoch: int) -> float:
        return self.genesis_time + epoch * self.epoch_duration


def slot_of(clock: SlotClock, t: float) -> int:
    if t < clock.genesis_time:
        raise ValueError("pre-genesis time")
    return int((t - clock.genesis_time) // clock.slot_duration)


def epoch_of(clock: SlotClock, t: float) -> int:
    if t < clock.genesis_time:
        raise ValueError("pre-genesis time")
    return int((t - clock.genesis_time) // clock.epoch_duration)


@dataclass(frozen=True)
class Message:
    id: int
    kind: str
    topic: str
    seqno: int
    size: int
    created_at: float
    originator: ValidatorId | None = None
    duty_slot: int | None = None

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.is_data:
            if self.originator is None or self.duty_slot is None:
                raise ValueError("data messages need an originator and a duty slot")
        elif self.originator is not None or self.duty_slot is not None:
            raise ValueError("control messages carry no originator or duty slot")

    @property
    def is_data(self) -> bool:
        return self.kind in DATA_KINDS


class MessageFactory:
    """Hands out unique message ids and per-originator sequence numbers."""

    def __init__(self):
        self._next_id = 0
        self._seqno: dict[int, int] = {}

    def data(self, kind, originator, duty_slot, size, t) -> Message:
        seq = self._seqno.get(originator, 0)
        self._seqno[originator] = seq + 1
        return self._make(kind, TOPICS[kind], seq, size, t, originator, duty_slot)

    def control(self, kind, topic, t) -> Message:
        return self._make(kind, topic, 0, 64, t, None, None)

    def _make(self, *args) -> Message:
        msg = Message(self._next_id, args[0], args[1], args[2], args[3], args[4], args[5], args[6])
        self._next_id += 1
        return msg


# ---------------------------------------------------------------------------
# Seeded randomness and the public duty schedule
# ---------------------------------------------------------------------------


def derive_seed(seed: int, *tags) -> int:
    h = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little")


def derive_rng(seed: int, *tags) -> random.Random:
    """Independent, reproducible stream for one purpose within a run."""
    return random.Random(derive_seed(seed, *tags))


def epoch_seed(rng_seed: int, epoch: int, domain: bytes) -> bytes:
    return hashlib.sha256(
        domain + (rng_seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little") + epoch.to_bytes(8, "little")
    ).digest()


class _Shuffler:
    """Swap-or-not shuffle over ``count`` indices, keyed by a 32-byte seed.

    Round ``r`` computes ``pivot = H(seed|r)[0:8] mod count`` and
    ``flip = (pivot + count - i) mod count``; with ``pos = max(i, flip)`` the
    index moves to ``flip`` iff bit ``pos % 8`` of byte ``(pos % 256) // 8``
    of ``H(seed|r|pos // 256)`` is set. ``r`` is one byte, ``pos // 256`` is
    four bytes little-endian, ``H`` is SHA-256.
    """

    def __init__(self, seed: bytes, count: int, rounds: int = SHUFFLE_ROUND_COUNT):
        self.seed = seed
        self.count = count
        self.rounds = rounds
        self._pivots = [
            int.from_bytes(hashlib.sha256(seed + bytes([r])).digest()[:8], "little") % count
            for r in range(rounds)
        ]
        self._sources: dict[tuple[int, int], bytes] = {}

    def _source(self, r: int, block: int) -> bytes:
        key = (r, block)
        src = self._sources.get(key)
        if src is None:
            src = hashlib.sha256(self.seed + bytes([r]) + block.to_bytes(4, "little")).digest()
            self._sources[key] = src
        return src

    def index(self, i: int) -> int:
        count = self.count
        if not 0 <= i < count:
            raise IndexError(i)
        for r in range(self.rounds):
            flip = (self._pivots[r] + count - i) % count
            pos = max(i, flip)
            byte = self._source(r, pos // 256)[(pos % 256) // 8]
            if (byte >> (pos % 8)) & 1:
                i = flip
        return i


@dataclass(frozen=True)
class Duty:
    validator: ValidatorId
    slot: int
    kind: str


def duty_schedule(cfg: SimConfig, epoch: int) -> list[Duty]:
    """Public duties of the simulated validators for one epoch.

    Validator ids index into a network population of size
    ``max(network_validators, n_validators)``. Attesters: a validator's
    shuffled position ``p`` maps to slot ``p * S // P``. Proposers: slot ``s``
    is proposed by the index whose proposer-shuffled position is ``s mod P``;
    only proposers inside the simulated set produce duties.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = cfg.n_validators
    if n == 0:
        return []
    population = max(cfg.network_validators, n)
    slots = cfg.slots_per_epoch
    base = epoch * slots
    att = _Shuffler(epoch_seed(cfg.rng_seed, epoch, b"attester"), population)
    prop = _Shuffler(epoch_seed(cfg.rng_seed, epoch, b"proposer"), population)

    duties = []
    for v in range(n):
        pos = att.index(v)
        slot = base + pos * slots // population
        duties.append(Duty(v, slot, "attestation"))
        if cfg.aggregator_modulo and pos % cfg.aggregator_modulo == 0:
            duties.append(Duty(v, slot, "aggregation"))
        ppos = prop.index(v)
        for s in range(ppos, slots, population):
            duties.append(Duty(v, base + s, "block_proposal"))
    duties.sort(key=lambda d: (d.slot, DATA_KINDS.index(d.kind), d.validator))
    return duties


def proposer_list(cfg: SimConfig, epoch: int) -> list[int]:
    """Network-wide proposer index for every slot of ``epoch``."""
    population = max(cfg.network_validators, cfg.n_validators)
    if population == 0:
        return []
    prop = _Shuffler(epoch_seed(cfg.rng_seed, epoch, b"proposer"), population)
    inverse = {}
    for idx in range(population):
        pos = prop.index(idx)
        if pos < cfg.slots_per_epoch:
            inverse[pos] = idx
    return [inverse[s % population] for s in range(cfg.slots_per_epoch)]


def epochs_in_run(cfg: SimConfig) -> int:
    return max(1, math.ceil(cfg.n_slots / cfg.slots_per_epoch)) if cfg.n_slots else 0


def iter_duties(cfg: SimConfig) -> Iterable[Duty]:
    for epoch in range(epochs_in_run(cfg)):
        for duty in duty_schedule(cfg, epoch):
            if duty.slot < cfg.n_slots:
                yield duty
