"""Command-line scenario runner.

    torpush-sim run --config scenario.conf --mode torpush --reps 4 --out results/
    torpush-sim run --config scenario.conf --sweep compromised_guard_fraction=0.05,0.1,0.2
    torpush-sim compare results/tor results/direct
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from . import adversary, engine, metrics
from .model import ConfigError, SimConfig, config_from_mapping, dump_config, parse_kv_text

log = logging.getLogger("torpush_sim")

SEED_ENV = "TORPUSH_SIM_SEED"
SCENARIO_KEYS = ("mode",)


@dataclass(frozen=True)
class ScenarioSpec:
    config: SimConfig
    plan: adversary.AdversaryPlan
    mode: str = "torpush"
    sweep: tuple | None = None  # (key, (raw values...))
    repetitions: int = 1
    out_dir: Path = Path("results")
    jobs: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.mode not in engine.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.sweep:
            key = self.sweep[0]
            if key not in SimConfig.__dataclass_fields__ and key not in adversary.PLAN_KEYS:
                raise ConfigError(f"invalid sweep target {key!r}")


def split_scenario(raw: dict[str, str]):
    """Partition flat keys into SimConfig, AdversaryPlan and scenario fields."""
    sim, plan, extra = {}, {}, {}
    for key, value in raw.items():
        if key in SimConfig.__dataclass_fields__:
            sim[key] = value
        elif key in adversary.PLAN_KEYS:
            plan[key] = value
        elif key in SCENARIO_KEYS:
            extra[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return sim, plan, extra


def build_plan(raw: dict[str, str], base: adversary.AdversaryPlan | None = None):
    values = {k: adversary.parse_plan_value(k, v) for k, v in raw.items()}
    return replace(base or adversary.AdversaryPlan(), **values)


def apply_override(cfg: SimConfig, plan, key: str, raw_value: str):
    if key in SimConfig.__dataclass_fields__:
        return config_from_mapping({key: raw_value}, cfg), plan
    return cfg, build_plan({key: raw_value}, plan)


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------


def analyze(trace: engine.Trace) -> dict:
    plan = trace.plan
    out: dict = {}
    tor_validators = len(trace.endpoints)
    if tor_validators:
        verdicts = adversary.guard_only_attack(trace, plan)
        out["guard_only"] = {"victims": tor_validators,
                             "identified": sum(v.identified for v in verdicts),
                             "rate": sum(v.identified for v in verdicts) / tor_validators}
        out["entry_exit_rate"] = adversary.entry_exit_attack(trace, plan)
        aset = adversary.rollout_anonymity_set(trace.directory, trace)
        out["anonymity_set"] = {"size": aset.size, "entropy_bits": aset.entropy_bits, "note": aset.note}
    if plan.run_discovery_anomaly and tor_validators:
        verdicts = adversary.discovery_connect_anomaly(trace, plan)
        out["discovery_anomaly"] = {"identified": sum(v.identified for v in verdicts),
                                    "rate": sum(v.identified for v in verdicts) / tor_validators}
    if plan.targeted_guard_dos and tor_validators:
        rep = adversary.targeted_guard_dos(trace.cfg, plan, trace=trace)
        out["targeted_guard_dos"] = {"victim": rep.victim, "guard": rep.guard,
                                     "duties": len(rep.duties), "miss_rate": rep.miss_rate}
    if plan.spam_attack or plan.lowered_scores_attack:
        rep = adversary.peer_score_attack(trace.cfg, plan, trace=trace)
        out["peer_score"] = {"targets": list(rep.targets), "pushed": rep.pushed,
                             "blocked": rep.blocked, "delayed": rep.delayed,
                             "affected_validators": list(rep.affected_validators)}
    return out


def verdict_rows(trace: engine.Trace):
    rows = []
    checks = [adversary.guard_only_attack]
    if trace.plan.run_discovery_anomaly:
        checks.append(adversary.discovery_connect_anomaly)
    for fn in checks:
        for v in fn(trace, trace.plan):
            rows.append([v.victim, v.mechanism, v.identified, len(v.evidence), v.claimed_address])
    return ["victim", "mechanism", "identified", "evidence_rows", "claimed_address"], rows


def run_one(cfg: SimConfig, plan, mode: str, run_dir: Path) -> dict:
    trace = engine.run(cfg, plan, mode)
    summary = metrics.run_summary(trace.records)
    atts = [r for r in trace.records if r.kind == "attestation"]
    try:
        summary["latency_all"] = metrics.latency_summary(atts)._asdict()
    except ValueError:
        summary["latency_all"] = None
    summary["analysis"] = analyze(trace)
    summary["seed"] = cfg.rng_seed
    summary["mode"] = mode

    metrics.export(trace.records, "csv", run_dir / "records.csv")
    metrics.export(summary, "json", run_dir / "summary.json")
    metrics.export(verdict_rows(trace), "csv", run_dir / "verdicts.csv")
    metrics.write_histogram([r.latency for r in atts if r.latency is not None],
                            run_dir / "latency_histogram.dat")
    metrics.atomic_write(run_dir / "config.txt", dump_config(cfg))
    return summary


def _run_job(job):
    cfg, plan, mode, run_dir = job
    return run_one(cfg, plan, mode, Path(run_dir))


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def _dig(summary: dict, *path):
    cur = summary
    for p in path:
        if cur is None:
            return None
        cur = cur.get(p)
    return cur


AGG_METRICS = {
    "latency_mean": ("latency_all", "mean"),
    "latency_tor_mean": ("latency_tor", "mean"),
    "latency_direct_mean": ("latency_direct", "mean"),
    "effectiveness_mean": ("effectiveness", "mean"),
    "miss_fraction": ("miss_frequency", "fraction"),
    "proposal_miss_fraction": ("proposals", "fraction"),
    "guard_only_rate": ("analysis", "guard_only", "rate"),
    "entry_exit_rate": ("analysis", "entry_exit_rate"),
    "anonymity_set_size": ("analysis", "anonymity_set", "size"),
    "discovery_anomaly_rate": ("analysis", "discovery_anomaly", "rate"),
    "targeted_dos_miss_rate": ("analysis", "targeted_guard_dos", "miss_rate"),
    "peer_score_blocked": ("analysis", "peer_score", "blocked"),
}


def aggregate(summaries: list[dict]) -> dict:
    out = {"repetitions": len(summaries)}
    for name, path in AGG_METRICS.items():
        out[name] = _mean(_dig(s, *path) for s in summaries)
    ident = [_dig(s, "analysis", "guard_only") for s in summaries]
    ident = [x for x in ident if x]
    if ident:
        out["guard_only_identified"] = sum(x["identified"] for x in ident)
        out["guard_only_trials"] = sum(x["victims"] for x in ident)
    return out


def run_scenario(spec: ScenarioSpec, quiet: bool = False) -> list[dict]:
    """Execute every sweep point x repetition and write per-run and aggregate artifacts."""
    out_dir = Path(spec.out_dir)
    points = [(None, None)]
    if spec.sweep:
        points = [(spec.sweep[0], v) for v in spec.sweep[1]]

    jobs, layout = [], []
    for key, value in points:
        cfg, plan = spec.config, spec.plan
        point_dir = out_dir
        if key is not None:
            cfg, plan = apply_override(cfg, plan, key, value)
            point_dir = out_dir / f"{key}={value}"
        for r in range(spec.repetitions):
            run_cfg = cfg.replace(rng_seed=cfg.rng_seed + r)
            jobs.append((run_cfg, plan, spec.mode, str(point_dir / f"rep-{r:04d}")))
        layout.append((key, value, len(jobs) - spec.repetitions, len(jobs)))

    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            summaries = list(pool.map(_run_job, jobs))
    else:
        summaries = [_run_job(j) for j in jobs]

    rows = []
    for key, value, lo, hi in layout:
        agg = aggregate(summaries[lo:hi])
        rows.append({"sweep_key": key, "sweep_value": value, "mode": spec.mode, **agg})
    header = list(rows[0])
    metrics.export((header, [[row[h] for h in header] for row in rows]), "csv", out_dir / "summary.csv")
    metrics.export({"mode": spec.mode, "points": rows}, "json", out_dir / "summary.json")
    if not quiet:
        print(format_table(rows))
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ["sweep_key", "sweep_value", "repetitions", "latency_mean", "effectiveness_mean",
            "miss_fraction", "guard_only_rate", "entry_exit_rate"]
    extra = [c for c in ("discovery_anomaly_rate", "targeted_dos_miss_rate", "peer_score_blocked")
             if any(r.get(c) is not None for r in rows)]
    cols += extra

    def cell(v):
        if v is None:
            return "-"
        return metrics.fmt_float(v) if isinstance(v, float) else str(v)

    table = [cols] + [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

COMPARE_METRICS = ("latency_mean", "effectiveness_mean", "miss_fraction", "proposal_miss_fraction")


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing summary: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def compare(run_a, run_b) -> list[dict]:
    """Per-metric mean difference ``a - b`` for each matching sweep point."""
    a, b = load_summary(run_a), load_summary(run_b)
    if len(a["points"]) != len(b["points"]):
        raise ValueError("runs have different sweep points")
    rows = []
    for pa, pb in zip(a["points"], b["points"]):
        for m in COMPARE_METRICS:
            va, vb = pa.get(m), pb.get(m)
            delta = va - vb if va is not None and vb is not None else None
            rows.append({"sweep_value": pa.get("sweep_value"), "metric": m,
                         "a": va, "b": vb, "delta": delta})
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _parse_sweep(text: str):
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise ConfigError("--sweep expects KEY=V1,V2,...")
    return key.strip(), tuple(v.strip() for v in values.split(",") if v.strip())


def spec_from_args(args) -> ScenarioSpec:
    raw = {}
    if args.config:
        try:
            raw = parse_kv_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    sim_raw, plan_raw, extra = split_scenario(raw)
    cfg = config_from_mapping(sim_raw)
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    elif "rng_seed" not in sim_raw and os.environ.get(SEED_ENV):
        try:
            cfg = cfg.replace(rng_seed=int(os.environ[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    mode = args.mode or extra.get("mode", "torpush")
    sweep = _parse_sweep(args.sweep) if args.sweep else None
    spec = ScenarioSpec(cfg, build_plan(plan_raw), mode, sweep, args.reps, Path(args.out), args.jobs)
    if sweep:
        # fail fast on unparsable sweep values
        for value in sweep[1]:
            apply_override(cfg, spec.plan, sweep[0], value)
    return spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torpush-sim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario (optionally swept and repeated)")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="results", metavar="DIR")
    p.add_argument("--mode", choices=engine.MODES)
    p.add_argument("--sweep", metavar="KEY=V1,V2,...")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--quiet", action="store_true")

    c = sub.add_parser("compare", help="mean differences between two run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", metavar="FILE", help="also write the table as CSV")
    c.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--") and argv[0] not in ("--help", "--verbose"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            run_scenario(spec_from_args(args), quiet=args.quiet)
        else:
            rows = compare(args.run_a, args.run_b)
            if args.out:
                header = ["sweep_value", "metric", "a", "b", "delta"]
                metrics.export((header, [[r[h] for h in header] for r in rows]), "csv", args.out)
            if not args.quiet:
                print(format_compare(rows))
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def format_compare(rows) -> str:
    lines = [f"{'point':<12} {'metric':<24} {'a':>12} {'b':>12} {'delta':>12}"]
    for r in rows:
        vals = ["-" if r[k] is None else metrics.fmt_float(r[k]) for k in ("a", "b", "delta")]
        point = "-" if r["sweep_value"] is None else str(r["sweep_value"])
        lines.append(f"{point:<12} {r['metric']:<24} {vals[0]:>12} {vals[1]:>12} {vals[2]:>12}")
    return "\n".join(lines)


if __name__ == "__main__":
    sys.exit(main())
