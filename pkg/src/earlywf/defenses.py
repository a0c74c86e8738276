"""Simplified padding and splitting defenses for robustness experiments.

``front_pad`` injects dummy packets whose send times follow a Rayleigh law,
so noise is concentrated near the start of the load.  ``split_traffic``
spreads packets over ``m`` paths with per-trace Dirichlet weights, and an
adversary on one path sees only that share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .traces import Dataset, PacketTrace, trace_rng


@dataclass(frozen=True)
class FrontConfig:
    client_budget: int = 1000
    server_budget: int = 1000
    rayleigh_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.client_budget < 0 or self.server_budget < 0:
            raise ValueError("padding budgets must be >= 0")
        if not self.rayleigh_scale > 0:
            raise ValueError("rayleigh_scale must be > 0")


@dataclass(frozen=True)
class SplitConfig:
    num_paths: int = 3
    seed: int = 0
    path: int = 0

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError("num_paths must be >= 1")
        if not 0 <= self.path < self.num_paths:
            raise ValueError("designated path must index one of the paths")


def _dummy_count(rng, budget):
    return int(rng.integers(1, budget + 1)) if budget > 0 else 0


def front_pad(trace: PacketTrace, cfg: FrontConfig, rng=None) -> PacketTrace:
    rng = trace_rng(cfg.seed, trace.trace_id, salt=1) if rng is None else rng
    n_c = _dummy_count(rng, cfg.client_budget)
    n_s = _dummy_count(rng, cfg.server_budget)
    if n_c + n_s == 0:
        return trace
    dummy_t = np.minimum(rng.rayleigh(cfg.rayleigh_scale, size=n_c + n_s), trace.duration)
    dummy_d = np.concatenate([np.ones(n_c, dtype=np.int8), -np.ones(n_s, dtype=np.int8)])
    times = np.concatenate([trace.times, dummy_t])
    dirs = np.concatenate([trace.directions, dummy_d])
    order = np.argsort(times, kind="stable")
    return PacketTrace(times[order], dirs[order], trace.label, trace.trace_id, normalize=False)


def split_assignment(trace: PacketTrace, cfg: SplitConfig, rng=None) -> np.ndarray:
    """Path index of every packet of ``trace``."""
    rng = trace_rng(cfg.seed, trace.trace_id, salt=2) if rng is None else rng
    if cfg.num_paths == 1:
        return np.zeros(len(trace), dtype=np.int64)
    weights = rng.dirichlet(np.ones(cfg.num_paths))
    return rng.choice(cfg.num_paths, size=len(trace), p=weights)


def split_traffic(trace: PacketTrace, cfg: SplitConfig, rng=None) -> list[PacketTrace]:
    """The ``m`` per-path sub-traces, each re-based to its own first packet."""
    if cfg.num_paths == 1:
        return [trace]
    assign = split_assignment(trace, cfg, rng)
    out = []
    for k in range(cfg.num_paths):
        sel = assign == k
        out.append(
            PacketTrace(trace.times[sel], trace.directions[sel], trace.label, f"{trace.trace_id}/p{k}")
        )
    return out


def sliver_view(trace: PacketTrace, cfg: SplitConfig) -> PacketTrace:
    """What an adversary on the designated path observes.

    If that path received no packets, the next non-empty path is used.
    """
    parts = split_traffic(trace, cfg)
    for k in range(cfg.num_paths):
        part = parts[(cfg.path + k) % cfg.num_paths]
        if len(part):
            return part.replace(trace_id=trace.trace_id)
    return trace


def defend_dataset(dataset: Dataset, defense: str, cfg) -> Dataset:
    if defense == "front":
        traces = [front_pad(t, cfg) for t in dataset.traces]
    elif defense in ("split", "trafficsliver"):
        traces = [sliver_view(t, cfg) for t in dataset.traces]
    elif defense in ("none", None):
        return dataset
    else:
        raise ValueError(f"unknown defense {defense!r}")
    return Dataset(tuple(traces), dataset.sites, dataset.role)
