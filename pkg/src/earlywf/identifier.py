"""Early-stage identification engine and trace replay harness.

At each tick of ``tau`` seconds the collected prefix is embedded and tested
against every site's sphere.  A hit ends the session.  Once more than
``sigma`` seconds have elapsed without a hit, the last embedding goes through
the drift fallback: the site with the smallest ``d - r`` wins if that margin
is below ``epsilon``, otherwise the flow is declared unmonitored.  Closed-world
mode uses ``epsilon = inf``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import TafConfig, extract_taf
from .profiling import ProfileStore, cosine_distances
from .traces import UNMONITORED, Dataset, PacketTrace, truncate_by_ratio

logger = logging.getLogger(__name__)

CLOSED_WORLD = "closed_world"
OPEN_WORLD = "open_world"

SPHERE_HIT = "sphere_hit"
DRIFT_FALLBACK = "drift_fallback"
REJECTED = "rejected"
ERROR = "error"


@dataclass(frozen=True)
class EngineConfig:
    tau: float = 0.12
    sigma: float = 80.0
    epsilon: float = 0.01
    mode: str = OPEN_WORLD
    taf: TafConfig = field(default_factory=TafConfig)
    chunk: int = 32

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.sigma < self.tau:
            raise ValueError("sigma must be >= tau")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0 (or inf)")
        if self.mode not in (CLOSED_WORLD, OPEN_WORLD):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def effective_epsilon(self) -> float:
        return math.inf if self.mode == CLOSED_WORLD else self.epsilon

    @property
    def max_ticks(self) -> int:
        """Index of the first tick whose elapsed time exceeds ``sigma``."""
        return math.floor(round(self.sigma / self.tau, 9)) + 1


@dataclass
class Verdict:
    trace_id: str
    truth: str
    label: Optional[str]
    via: str
    decision_time: float
    loading_ratio: float
    margin: float
    error: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["error"] is None:
            del d["error"]
        if not math.isfinite(d["margin"]):
            d["margin"] = None
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "Verdict":
        d = json.loads(line)
        if d.get("margin") is None:
            d["margin"] = math.nan
        return cls(**d)


class _Spheres:
    """Profile arrays in a fixed order for vectorised distance tests."""

    def __init__(self, profiles: ProfileStore):
        self.sites, self.centroids, self.radii = profiles.arrays()

    def margins(self, Z):
        return cosine_distances(self.centroids, Z) - self.radii[None, :]


def _hit(margins_row, sites):
    inside = np.flatnonzero(margins_row <= 0)
    if len(inside) == 0:
        return None
    best = inside[np.argmin(margins_row[inside])]
    return sites[best], float(margins_row[best])


def _fallback(margins_row, sites, epsilon):
    d_min = epsilon
    label = UNMONITORED
    for site, m in zip(sites, margins_row):
        if m < d_min:
            d_min = m
            label = site
    return label, float(np.min(margins_row)) if len(margins_row) else math.inf


def step(profiles: ProfileStore, model, prefix: PacketTrace, cfg: EngineConfig = EngineConfig()):
    """Embed ``prefix`` and return ``(site, margin)`` for a sphere hit, else ``None``."""
    if model.eta != profiles.eta:
        raise ValueError(f"model eta {model.eta} != profile eta {profiles.eta}")
    spheres = _Spheres(profiles)
    z = model.embed(extract_taf(prefix, cfg.taf))
    return _hit(spheres.margins(z)[0], spheres.sites)


def drift_fallback(profiles: ProfileStore, z, epsilon: float):
    """Assign the site with the smallest ``d - r`` below ``epsilon``.

    Returns ``(label, margin)``; ``label`` is ``"unmonitored"`` when no site
    qualifies, and ``margin`` is the smallest ``d - r`` over all sites.
    """
    spheres = _Spheres(profiles)
    return _fallback(spheres.margins(z)[0], spheres.sites, epsilon)


class ReplaySession:
    """Simulated clock over a recorded trace; the prefix at ``T`` holds packets with timestamp <= T."""

    def __init__(self, trace: PacketTrace, tau: float):
        self.trace = trace
        self.tau = tau
        self.ticks = 0

    @property
    def clock(self) -> float:
        return self.ticks * self.tau

    def prefix_at(self, tick: int) -> PacketTrace:
        return self.trace.prefix(tick * self.tau)

    def advance(self) -> PacketTrace:
        self.ticks += 1
        return self.prefix_at(self.ticks)


def _ratio(decision_time, duration):
    if duration <= 0:
        return 1.0
    return min(1.0, decision_time / duration)


def replay(profiles: ProfileStore, model, trace: PacketTrace, cfg: EngineConfig = EngineConfig()) -> Verdict:
    """Run the engine over ``trace`` on a simulated clock.

    Ticks whose prefix is unchanged from the previous tick reuse its (miss)
    result, and once the whole trace is visible the remaining ticks up to the
    timeout are skipped: identical input, identical outcome.
    """
    if len(trace) == 0:
        raise ValueError("cannot replay an empty trace")
    if model.eta != profiles.eta:
        raise ValueError(f"model eta {model.eta} != profile eta {profiles.eta}")
    spheres = _Spheres(profiles)
    session = ReplaySession(trace, cfg.tau)
    k_max = cfg.max_ticks
    k_full = min(k_max, max(1, math.ceil(round(trace.duration / cfg.tau, 9))))
    # candidate ticks: the first tick plus every tick that sees new packets
    ticks = np.arange(1, k_full + 1)
    counts = np.searchsorted(trace.times, ticks * cfg.tau, side="right")
    changed = np.concatenate([[True], counts[1:] != counts[:-1]])
    ticks = ticks[changed]

    last_margins = None
    for start in range(0, len(ticks), cfg.chunk):
        group = ticks[start:start + cfg.chunk]
        X = np.stack([extract_taf(session.prefix_at(int(k)), cfg.taf) for k in group])
        M = spheres.margins(model.embed(X))
        for k, row in zip(group, M):
            found = _hit(row, spheres.sites)
            if found is not None:
                t = int(k) * cfg.tau
                return Verdict(trace.trace_id, trace.label, found[0], SPHERE_HIT, t,
                               _ratio(t, trace.duration), float(row.min()))
        last_margins = M[-1]

    # timeout: the prefix at tick k_max equals the last evaluated prefix
    t = k_max * cfg.tau
    label, margin = _fallback(last_margins, spheres.sites, cfg.effective_epsilon)
    via = REJECTED if label == UNMONITORED else DRIFT_FALLBACK
    return Verdict(trace.trace_id, trace.label, label, via, t, _ratio(t, trace.duration), margin)


def batch_replay(profiles: ProfileStore, model, test, cfg: EngineConfig = EngineConfig(), ratio=None):
    """One verdict per trace, in order.

    With ``ratio`` set, the clock is bypassed: each trace is cut with
    :func:`truncate_by_ratio` and tested once, falling back to the drift rule
    on a miss.  Per-trace failures are recorded as ``via="error"`` verdicts.
    """
    traces = list(getattr(test, "traces", test))
    if ratio is None:
        out = []
        for trace in traces:
            try:
                out.append(replay(profiles, model, trace, cfg))
            except Exception as exc:  # noqa: BLE001 - recorded, run continues
                logger.warning("replay of %s failed: %s", trace.trace_id, exc)
                out.append(Verdict(trace.trace_id, trace.label, None, ERROR, 0.0, 0.0, math.nan, str(exc)))
        return out

    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    spheres = _Spheres(profiles)
    out: list = [None] * len(traces)
    feats, rows = [], []
    for i, trace in enumerate(traces):
        try:
            feats.append(extract_taf(truncate_by_ratio(trace, ratio), cfg.taf))
            rows.append(i)
        except Exception as exc:  # noqa: BLE001
            out[i] = Verdict(trace.trace_id, trace.label, None, ERROR, 0.0, 0.0, math.nan, str(exc))
    if rows:
        M = spheres.margins(model.embed(np.stack(feats)))
        for i, row in zip(rows, M):
            trace = traces[i]
            t = ratio * trace.duration
            found = _hit(row, spheres.sites)
            if found is not None:
                out[i] = Verdict(trace.trace_id, trace.label, found[0], SPHERE_HIT, t, ratio, float(row.min()))
                continue
            label, margin = _fallback(row, spheres.sites, cfg.effective_epsilon)
            via = REJECTED if label == UNMONITORED else DRIFT_FALLBACK
            out[i] = Verdict(trace.trace_id, trace.label, label, via, t, ratio, margin)
    return out


def write_verdicts(verdicts, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(v.to_json() + "\n" for v in verdicts))
    return path


def read_verdicts(path) -> list[Verdict]:
    return [Verdict.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
