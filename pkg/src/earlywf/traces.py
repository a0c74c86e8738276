"""Packet traces: loading, saving, splitting, truncation and synthesis.

A trace is an ordered sequence of ``(timestamp, direction)`` records for one
page load.  Directions are ``+1`` for outgoing (client to entry guard) and
``-1`` for incoming.  On disk a trace is a two-column text file::

    0.0\t1
    0.0123\t-1

A dataset directory holds ``monitored/<site>-<instance>.cell`` and
``unmonitored/<instance>.cell`` files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNMONITORED = "unmonitored"
TRACE_SUFFIX = ".cell"
ROLES = ("train", "validation", "test")


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyTraceError(TraceFormatError):
    pass


class DatasetError(ValueError):
    pass


class PacketTrace:
    """One page load: packet timestamps (seconds) and directions (+1/-1).

    Instances are treated as immutable; the arrays are flagged read-only.
    """

    __slots__ = ("times", "directions", "label", "trace_id")

    def __init__(self, times, directions, label=UNMONITORED, trace_id="", normalize=True):
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        directions = np.asarray(directions, dtype=np.int8).reshape(-1)
        if times.shape != directions.shape:
            raise ValueError(
                f"times and directions differ in length ({len(times)} != {len(directions)})"
            )
        if len(times):
            if not np.all(np.isfinite(times)):
                raise ValueError("timestamps must be finite")
            if np.any(np.diff(times) < 0):
                raise ValueError("timestamps must be non-decreasing")
            if not np.all(np.abs(directions) == 1):
                raise ValueError("directions must be +1 or -1")
            if normalize and times[0] != 0.0:
                times = times - times[0]
            if times[0] < 0:
                raise ValueError("timestamps must be >= 0")
        times.setflags(write=False)
        directions.setflags(write=False)
        self.times = times
        self.directions = directions
        self.label = str(label)
        self.trace_id = str(trace_id)

    def __len__(self):
        return len(self.times)

    def __repr__(self):
        return (
            f"PacketTrace(id={self.trace_id!r}, label={self.label!r}, "
            f"packets={len(self)}, duration={self.duration:.3f})"
        )

    def __eq__(self, other):
        if not isinstance(other, PacketTrace):
            return NotImplemented
        return (
            self.label == other.label
            and self.trace_id == other.trace_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.directions, other.directions)
        )

    __hash__ = None

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    @property
    def packets(self) -> list[tuple[float, int]]:
        return list(zip(self.times.tolist(), self.directions.tolist()))

    @property
    def is_monitored(self) -> bool:
        return self.label != UNMONITORED

    def prefix(self, cutoff: float) -> "PacketTrace":
        """Packets with timestamp <= ``cutoff`` (inclusive)."""
        end = int(np.searchsorted(self.times, cutoff, side="right"))
        return self.replace(times=self.times[:end], directions=self.directions[:end])

    def replace(self, **changes) -> "PacketTrace":
        kwargs = dict(
            times=self.times,
            directions=self.directions,
            label=self.label,
            trace_id=self.trace_id,
        )
        kwargs.update(changes)
        return PacketTrace(**kwargs, normalize=False)


@dataclass(frozen=True)
class Dataset:
    traces: tuple
    sites: frozenset
    role: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "sites", frozenset(self.sites))
        if self.role not in ROLES:
            raise DatasetError(f"unknown dataset role {self.role!r}")
        ids = [t.trace_id for t in self.traces]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DatasetError(f"duplicate trace_id {dup!r}")
        if self.role in ("train", "validation"):
            stray = {t.label for t in self.traces if t.is_monitored} - self.sites
            if stray:
                raise DatasetError(f"labels not in site set: {sorted(stray)}")

    @classmethod
    def from_traces(cls, traces: Iterable[PacketTrace], role="train", sites=None):
        traces = tuple(traces)
        if sites is None:
            sites = {t.label for t in traces if t.is_monitored}
        return cls(traces=traces, sites=frozenset(sites), role=role)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.traces]

    def by_site(self) -> dict[str, list[PacketTrace]]:
        groups: dict[str, list[PacketTrace]] = {}
        for t in self.traces:
            groups.setdefault(t.label, []).append(t)
        return groups

    def monitored(self) -> "Dataset":
        return Dataset(tuple(t for t in self.traces if t.is_monitored), self.sites, self.role)

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.traces, self.sites, role)


# ---------------------------------------------------------------------------
# file io


def label_from_filename(path) -> str:
    stem = Path(path).name
    if stem.endswith(TRACE_SUFFIX):
        stem = stem[: -len(TRACE_SUFFIX)]
    if "-" in stem:
        return stem.rsplit("-", 1)[0]
    return UNMONITORED


def parse_trace_text(text: str, path=None) -> tuple[np.ndarray, np.ndarray]:
    times, directions = [], []
    last = -math.inf
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            parts = line.split()
        if len(parts) != 2:
            raise TraceFormatError(f"expected 2 columns, got {len(parts)}", path, lineno)
        try:
            ts = float(parts[0])
            direction = int(float(parts[1]))
        except ValueError as exc:
            raise TraceFormatError(f"unparseable record {line!r}", path, lineno) from exc
        if not math.isfinite(ts):
            raise TraceFormatError(f"invalid timestamp {parts[0]!r}", path, lineno)
        if direction not in (1, -1) or float(parts[1]) != direction:
            raise TraceFormatError(f"direction must be 1 or -1, got {parts[1]!r}", path, lineno)
        if ts < last:
            raise TraceFormatError(
                f"timestamp {ts} decreases from previous {last}", path, lineno
            )
        last = ts
        times.append(ts)
        directions.append(direction)
    if not times:
        raise EmptyTraceError("trace contains no packets", path)
    return np.asarray(times), np.asarray(directions)


def load_trace(path, label=None) -> PacketTrace:
    """Read a trace file, shifting timestamps so the first packet is at 0."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    times, directions = parse_trace_text(text, path)
    name = path.name[: -len(TRACE_SUFFIX)] if path.name.endswith(TRACE_SUFFIX) else path.stem
    return PacketTrace(
        times,
        directions,
        label=label_from_filename(path) if label is None else label,
        trace_id=name,
    )


def format_trace(trace: PacketTrace) -> str:
    return "".join(
        f"{t!r}\t{d}\n" for t, d in zip(trace.times.tolist(), trace.directions.tolist())
    )


def save_trace(trace: PacketTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_trace(trace), encoding="utf-8")
    return path


def trace_filename(trace: PacketTrace) -> str:
    if trace.is_monitored:
        prefix = f"{trace.label}-"
        instance = trace.trace_id[len(prefix):] if trace.trace_id.startswith(prefix) else trace.trace_id
        return f"{trace.label}-{instance.replace('-', '_')}{TRACE_SUFFIX}"
    return f"{trace.trace_id.replace('-', '_')}{TRACE_SUFFIX}"


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``monitored/`` and ``unmonitored/`` trace files plus a manifest."""
    directory = Path(directory)
    for sub in ("monitored", "unmonitored"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for trace in dataset.traces:
        sub = "monitored" if trace.is_monitored else "unmonitored"
        save_trace(trace, directory / sub / trace_filename(trace))
    manifest = {"role": dataset.role, "sites": sorted(dataset.sites), "count": len(dataset)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_dataset(directory, role=None) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
    traces = []
    mon = directory / "monitored"
    unmon = directory / "unmonitored"
    if mon.is_dir():
        for p in sorted(mon.glob(f"*{TRACE_SUFFIX}")):
            traces.append(load_trace(p))
    if unmon.is_dir():
        for p in sorted(unmon.glob(f"*{TRACE_SUFFIX}")):
            traces.append(load_trace(p, label=UNMONITORED))
    if not traces:
        raise DatasetError(f"no {TRACE_SUFFIX} files under {directory}")
    sites = set(manifest.get("sites", [])) | {t.label for t in traces if t.is_monitored}
    return Dataset(tuple(traces), frozenset(sites), role or manifest.get("role", "train"))


# ---------------------------------------------------------------------------
# splitting and truncation


def _split_counts(n: int, ratios=(8, 1, 1)) -> list[int]:
    total = sum(ratios)
    counts = [n * r // total for r in ratios]
    i = 0
    while sum(counts) < n:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def split_dataset(dataset: Dataset, seed: int = 0, min_per_site: int = 10):
    """Stratified 8:1:1 split into (train, validation, test).

    Leftover traces after the integer split go to train first, then
    validation, then test.  Unmonitored traces are split as one group.
    """
    groups = dataset.by_site()
    for site in sorted(groups):
        if site != UNMONITORED and len(groups[site]) < min_per_site:
            raise DatasetError(
                f"site {site!r} has {len(groups[site])} traces; at least {min_per_site} required"
            )
    rng = np.random.default_rng(seed)
    parts: list[list[PacketTrace]] = [[], [], []]
    for site in sorted(groups):
        members = groups[site]
        order = rng.permutation(len(members))
        counts = _split_counts(len(members))
        start = 0
        for k, c in enumerate(counts):
            parts[k].extend(members[j] for j in order[start:start + c])
            start += c
    return tuple(
        Dataset(tuple(p), dataset.sites, role) for p, role in zip(parts, ROLES)
    )


def truncate_by_ratio(trace: PacketTrace, ratio: float) -> PacketTrace:
    """Keep packets with timestamp <= ratio * duration."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    if len(trace) == 0:
        raise EmptyTraceError("cannot truncate an empty trace")
    if ratio == 1.0:
        return trace
    return trace.prefix(ratio * trace.duration)


# ---------------------------------------------------------------------------
# synthetic traffic


@dataclass
class SiteParams:
    """Generative parameters for one synthetic website.

    Burst sizes are ``1 + NegBin`` with the given mean and dispersion (the
    negative-binomial shape; larger is less variable).  Gaps between bursts
    are lognormal with median ``gap_median`` seconds.  ``head_boost``
    multiplies incoming burst sizes during the first ``head_fraction`` of the
    page load, giving each site a temporal signature.
    """

    out_burst_mean: float = 2.0
    in_burst_mean: float = 12.0
    burst_dispersion: float = 4.0
    gap_median: float = 0.08
    gap_sigma: float = 0.5
    duration_mean: float = 15.0
    duration_std: float = 2.0
    intra_gap: float = 0.002
    head_fraction: float = 0.2
    head_boost: float = 1.0

    def validate(self):
        if self.out_burst_mean < 1 or self.in_burst_mean < 1:
            raise ValueError("burst means must be >= 1")
        if self.burst_dispersion <= 0 or self.gap_median <= 0 or self.gap_sigma < 0:
            raise ValueError("dispersion and gap parameters must be positive")
        if self.duration_mean <= 0 or self.duration_std < 0 or self.intra_gap <= 0:
            raise ValueError("duration parameters must be positive")
        if not 0 <= self.head_fraction <= 1 or self.head_boost <= 0:
            raise ValueError("head_fraction in [0,1] and head_boost > 0 required")


@dataclass
class SynthSpec:
    num_sites: int = 20
    traces_per_site: int = 100
    seed: int = 0
    num_unmonitored_sites: int = 0
    site_params: list = field(default_factory=list)

    def validate(self):
        if self.num_sites < 1 or self.traces_per_site < 1:
            raise ValueError("num_sites and traces_per_site must be >= 1")
        if self.num_unmonitored_sites < 0:
            raise ValueError("num_unmonitored_sites must be >= 0")
        total = self.num_sites + self.num_unmonitored_sites
        if self.site_params and len(self.site_params) != total:
            raise ValueError(
                f"site_params has {len(self.site_params)} entries, expected {total}"
            )
        for p in self.resolved_params():
            p.validate()

    def resolved_params(self) -> list[SiteParams]:
        if self.site_params:
            return [p if isinstance(p, SiteParams) else SiteParams(**p) for p in self.site_params]
        return random_site_params(self.num_sites + self.num_unmonitored_sites, self.seed)

    @classmethod
    def from_json(cls, path_or_text) -> "SynthSpec":
        if isinstance(path_or_text, (str, os.PathLike)) and Path(path_or_text).exists():
            data = json.loads(Path(path_or_text).read_text())
        else:
            data = json.loads(path_or_text)
        params = [SiteParams(**p) for p in data.pop("site_params", [])]
        spec = cls(**data, site_params=params)
        spec.validate()
        return spec

    def to_json(self) -> str:
        data = asdict(self)
        return json.dumps(data, indent=2)


def _stratified(rng, k):
    """k points in [0, 1), one per stratum, in random order."""
    return (rng.permutation(k) + rng.uniform(0.1, 0.9, size=k)) / k


def random_site_params(k: int, seed: int) -> list[SiteParams]:
    """Spread ``k`` sites over the parameter space with a Latin-hypercube draw."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    u_out, u_in, u_gap, u_dur, u_head = (_stratified(rng, k) for _ in range(5))
    params = []
    for i in range(k):
        dur = 8.0 + 22.0 * u_dur[i]
        params.append(
            SiteParams(
                out_burst_mean=1.0 + 4.0 * u_out[i],
                in_burst_mean=float(np.exp(np.log(4.0) + (np.log(48.0) - np.log(4.0)) * u_in[i])),
                burst_dispersion=float(rng.uniform(3.0, 8.0)),
                gap_median=float(np.exp(np.log(0.025) + (np.log(0.3) - np.log(0.025)) * u_gap[i])),
                gap_sigma=float(rng.uniform(0.3, 0.6)),
                duration_mean=dur,
                duration_std=0.1 * dur,
                head_fraction=float(rng.uniform(0.1, 0.35)),
                head_boost=float(0.4 + 2.6 * u_head[i]),
            )
        )
    return params


def _burst_sizes(rng, mean, dispersion, size):
    extra = mean - 1.0
    if extra <= 0:
        return np.ones(size, dtype=np.int64)
    p = dispersion / (dispersion + extra)
    return 1 + rng.negative_binomial(dispersion, p, size=size)


def synth_trace(params: SiteParams, rng, label=UNMONITORED, trace_id="") -> PacketTrace:
    duration = max(0.25 * params.duration_mean, rng.normal(params.duration_mean, params.duration_std))
    head_end = params.head_fraction * duration
    times: list[np.ndarray] = []
    dirs: list[np.ndarray] = []
    t = 0.0
    direction = 1
    while t <= duration:
        if direction == 1:
            size = int(_burst_sizes(rng, params.out_burst_mean, params.burst_dispersion, 1)[0])
        else:
            mean = params.in_burst_mean * (params.head_boost if t < head_end else 1.0)
            size = int(_burst_sizes(rng, max(mean, 1.0), params.burst_dispersion, 1)[0])
        offsets = np.concatenate([[0.0], np.cumsum(rng.exponential(params.intra_gap, size - 1))])
        times.append(t + offsets)
        dirs.append(np.full(size, direction, dtype=np.int8))
        t = float(t + offsets[-1] + rng.lognormal(np.log(params.gap_median), params.gap_sigma))
        direction = -direction
    # round to microseconds so text round-trips are exact at the printed precision
    all_times = np.round(np.concatenate(times), 6)
    return PacketTrace(np.maximum.accumulate(all_times), np.concatenate(dirs), label, trace_id)


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Generate a burst-structured dataset; a pure function of ``spec``."""
    spec.validate()
    params = spec.resolved_params()
    traces = []
    sites = []
    for k, p in enumerate(params):
        monitored = k < spec.num_sites
        site = f"site{k:03d}"
        if monitored:
            sites.append(site)
        for i in range(spec.traces_per_site):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, k, i]))
            if monitored:
                traces.append(synth_trace(p, rng, site, f"{site}-{i}"))
            else:
                traces.append(synth_trace(p, rng, UNMONITORED, f"u{k:03d}_{i}"))
    logger.debug("synthesized %d traces over %d sites", len(traces), len(params))
    return Dataset(tuple(traces), frozenset(sites), "train")


def trace_rng(seed: int, trace_id: str, salt: int = 0) -> np.random.Generator:
    """Generator keyed by ``(seed, trace_id)`` so per-trace draws ignore processing order."""
    digest = hashlib.blake2b(trace_id.encode(), digest_size=8).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, salt, int.from_bytes(digest, "little")])
    )


def concat_datasets(parts: Sequence[Dataset], role="train") -> Dataset:
    traces = [t for d in parts for t in d.traces]
    sites = frozenset().union(*(d.sites for d in parts))
    return Dataset(tuple(traces), sites, role)
