"""Latency, attestation effectiveness and miss-frequency metrics, plus
CSV / JSON / histogram serialisation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence


@dataclass(frozen=True)
class AttestationRecord:
    validator: int
    duty_slot: int
    actual_inclusion_slot: int | None
    created_at: float
    first_mesh_arrival: float | None
    via_tor: bool
    kind: str = "attestation"
    msg_id: int = -1
    first_node: int | None = None
    dropped: bool = False
    reach: int = 0

    def __post_init__(self):
        if self.actual_inclusion_slot is not None and self.actual_inclusion_slot <= self.duty_slot:
            raise ValueError("data corruption: inclusion slot not after duty slot")

    @property
    def earliest_inclusion_slot(self) -> int:
        return self.duty_slot + 1

    @property
    def latency(self) -> float | None:
        if self.first_mesh_arrival is None:
            return None
        return self.first_mesh_arrival - self.created_at

    @property
    def missed(self) -> bool:
        return self.actual_inclusion_slot is None


RECORD_FIELDS = ("validator", "kind", "msg_id", "duty_slot", "earliest_inclusion_slot",
                 "actual_inclusion_slot", "created_at", "first_mesh_arrival", "latency",
                 "via_tor", "first_node", "dropped", "reach", "effectiveness")


class StatSummary(NamedTuple):
    count: int
    mean: float
    std: float
    sem: float


class MissFrequency(NamedTuple):
    missed: int
    total: int
    fraction: float


def summarize(samples: Iterable[float]) -> StatSummary:
    """Mean, population standard deviation and standard error of the mean."""
    xs = list(samples)
    n = len(xs)
    if n == 0:
        raise ValueError("no samples")
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / n
    std = math.sqrt(var)
    return StatSummary(n, mean, std, std / math.sqrt(n))


def effectiveness(rec: AttestationRecord) -> float | None:
    """Earliest-possible inclusion distance over actual inclusion distance.

    ``None`` marks a missed attestation.
    """
    if rec.actual_inclusion_slot is None:
        return None
    if rec.actual_inclusion_slot <= rec.duty_slot:
        raise ValueError("data corruption: inclusion slot not after duty slot")
    return (rec.earliest_inclusion_slot - rec.duty_slot) / (rec.actual_inclusion_slot - rec.duty_slot)


def effectiveness_summary(records: Iterable[AttestationRecord]) -> StatSummary | None:
    values = [e for e in (effectiveness(r) for r in records) if e is not None]
    return summarize(values) if values else None


def miss_frequency(records: Iterable[AttestationRecord]) -> MissFrequency:
    total = missed = 0
    for r in records:
        total += 1
        missed += r.missed
    return MissFrequency(missed, total, missed / total if total else 0.0)


def latency_summary(records: Iterable[AttestationRecord], via_tor: bool | None = None) -> StatSummary:
    return summarize(r.latency for r in records
                     if r.latency is not None and (via_tor is None or r.via_tor == via_tor))


def overhead(tor: StatSummary, direct: StatSummary) -> float:
    return tor.mean - direct.mean


def histogram(samples: Iterable[float], bin_width: float = 100.0) -> list[tuple[float, int]]:
    counts: dict[int, int] = {}
    for x in samples:
        b = math.floor(x / bin_width)
        counts[b] = counts.get(b, 0) + 1
    if not counts:
        return []
    lo, hi = min(counts), max(counts)
    return [(b * bin_width, counts.get(b, 0)) for b in range(lo, hi + 1)]


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def fmt_float(x: float) -> str:
    return f"{x:.6g}"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return fmt_float(value)
    return str(value)


def _round6(value):
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return None
        return float(fmt_float(value))
    if isinstance(value, dict):
        return {str(k): _round6(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        if hasattr(value, "_asdict"):
            return _round6(value._asdict())
        return [_round6(v) for v in value]
    if dataclasses.is_dataclass(value):
        return _round6(dataclasses.asdict(value))
    return value


def record_row(rec: AttestationRecord) -> list:
    e = effectiveness(rec)
    return [rec.validator, rec.kind, rec.msg_id, rec.duty_slot, rec.earliest_inclusion_slot,
            rec.actual_inclusion_slot, rec.created_at, rec.first_mesh_arrival, rec.latency,
            rec.via_tor, rec.first_node, rec.dropped, rec.reach, e]


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(_round6(obj), indent=2, sort_keys=True) + "\n"


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` via a temp file and rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export(results, format: str, destination) -> Path:
    """Write records (``csv``) or summaries (``json``) to ``destination``.

    CSV takes an iterable of :class:`AttestationRecord` or ``(header, rows)``;
    JSON takes any mapping or sequence of summaries.
    """
    if format == "csv":
        if isinstance(results, tuple) and len(results) == 2 and isinstance(results[0], (list, tuple)):
            text = rows_to_csv(results[0], results[1])
        else:
            text = rows_to_csv(RECORD_FIELDS, (record_row(r) for r in results))
    elif format == "json":
        text = to_json(results)
    else:
        raise ValueError(f"unknown export format {format!r}")
    atomic_write(destination, text)
    return Path(destination)


def write_histogram(samples: Iterable[float], destination, bin_width: float = 100.0) -> Path:
    """Two-column ``bin_left_edge_ms count`` data file (gnuplot ``using 1:2``)."""
    lines = ["# bin_left_edge_ms count"]
    lines += [f"{fmt_float(edge)} {count}" for edge, count in histogram(samples, bin_width)]
    atomic_write(destination, "\n".join(lines) + "\n")
    return Path(destination)


def run_summary(records: Sequence[AttestationRecord]) -> dict:
    """Per-run metric block as written to ``summary.json``."""
    atts = [r for r in records if r.kind == "attestation"]
    out = {"attestations": len(atts), "data_messages": len(records)}
    for label, flag in (("tor", True), ("direct", False)):
        try:
            out[f"latency_{label}"] = latency_summary(atts, via_tor=flag)._asdict()
        except ValueError:
            out[f"latency_{label}"] = None
    eff = effectiveness_summary(atts)
    out["effectiveness"] = eff._asdict() if eff else None
    out["miss_frequency"] = miss_frequency(atts)._asdict()
    props = [r for r in records if r.kind == "block_proposal"]
    out["proposals"] = miss_frequency(props)._asdict()
    return out
