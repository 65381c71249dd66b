"""End-to-end delivery latency over a Tor path."""

from __future__ import annotations

import random
from typing import NamedTuple

from .model import SimConfig

TOR_HOPS = 3


class LatencyModel(NamedTuple):
    l_base: float
    l_hop: float
    n_hops: int
    s_msg: float
    c_bw: float


def latency(m: LatencyModel) -> float:
    """``l_base + n_hops * l_hop + s_msg / c_bw`` in milliseconds."""
    if not m.c_bw > 0:
        raise ValueError("c_bw must be > 0")
    if m.n_hops < 0:
        raise ValueError("n_hops must be >= 0")
    return m.l_base + m.n_hops * m.l_hop + m.s_msg / m.c_bw


def sample_model(cfg: SimConfig, s_msg: float, rng: random.Random, n_hops: int = TOR_HOPS) -> LatencyModel:
    return LatencyModel(
        cfg.base_latency_dist.sample(rng),
        cfg.hop_latency_dist.sample(rng),
        n_hops,
        float(s_msg),
        cfg.bandwidth_dist.sample(rng),
    )


def analytic_mean(cfg: SimConfig, s_msg: float, n_hops: int = TOR_HOPS) -> float:
    """Mean latency with every component at its distribution mean."""
    return latency(LatencyModel(cfg.base_latency_dist.mean, cfg.hop_latency_dist.mean,
                                n_hops, s_msg, cfg.bandwidth_dist.mean))
