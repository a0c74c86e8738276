"""Window-aggregated traffic features.

Two feature families live here:

* TAF (traffic aggregation features): for each of ``rho`` windows of
  ``theta_ms`` milliseconds, the packet count, burst count and mean burst
  size per direction.  Shape ``(3, 2, rho)`` with axes
  (feature type, direction, window); direction 0 is outgoing, 1 incoming.
* Interval counts: the page load split into ``n`` equal intervals, with the
  number of outgoing and incoming packets in each.  Shape ``(n, 2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .traces import EmptyTraceError, PacketTrace

PACKETS, BURSTS, MEAN_BURST = 0, 1, 2
OUT, IN = 0, 1


@dataclass(frozen=True)
class TafConfig:
    rho: int = 2000
    theta_ms: float = 80.0

    def __post_init__(self):
        if int(self.rho) != self.rho or self.rho < 1:
            raise ValueError(f"rho must be a positive integer, got {self.rho}")
        if not self.theta_ms > 0:
            raise ValueError(f"theta_ms must be > 0, got {self.theta_ms}")

    @property
    def theta(self) -> float:
        """Window length in seconds."""
        return self.theta_ms / 1000.0

    @property
    def horizon(self) -> float:
        return self.rho * self.theta


def _direction_index(directions):
    return (directions < 0).astype(np.int64)


def extract_taf(trace: PacketTrace, cfg: TafConfig = TafConfig()) -> np.ndarray:
    rho = int(cfg.rho)
    out = np.zeros((3, 2, rho), dtype=np.float64)
    if len(trace) == 0:
        return out
    times, dirs = trace.times, trace.directions
    window = np.floor(times / cfg.theta).astype(np.int64)
    didx = _direction_index(dirs)

    keep = window < rho
    out[PACKETS] = np.bincount(
        didx[keep] * rho + window[keep], minlength=2 * rho
    ).reshape(2, rho)

    # bursts are maximal same-direction runs, credited to the window of their first packet
    starts = np.flatnonzero(np.concatenate([[True], dirs[1:] != dirs[:-1]]))
    sizes = np.diff(np.append(starts, len(dirs)))
    b_window = window[starts]
    b_dir = didx[starts]
    b_keep = b_window < rho
    cell = b_dir[b_keep] * rho + b_window[b_keep]
    counts = np.bincount(cell, minlength=2 * rho).reshape(2, rho)
    totals = np.bincount(cell, weights=sizes[b_keep], minlength=2 * rho).reshape(2, rho)
    out[BURSTS] = counts
    np.divide(totals, counts, out=out[MEAN_BURST], where=counts > 0)
    return out


def extract_interval_features(trace: PacketTrace, n: int = 100) -> np.ndarray:
    """Per-interval (outgoing, incoming) packet counts over ``[0, duration]``.

    The last interval is closed at the duration so every packet is counted.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(trace) == 0:
        raise EmptyTraceError("interval features need a non-empty trace")
    duration = trace.duration
    if duration > 0:
        idx = np.minimum(np.floor(trace.times / duration * n).astype(np.int64), n - 1)
    else:
        idx = np.zeros(len(trace), dtype=np.int64)
    didx = _direction_index(trace.directions)
    return np.bincount(idx * 2 + didx, minlength=2 * n).reshape(n, 2)


class TafTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping a list of traces to a ``(N, 3, 2, rho)`` array."""

    def __init__(self, rho=2000, theta_ms=80.0, dtype=np.float32):
        self.rho = rho
        self.theta_ms = theta_ms
        self.dtype = dtype

    @property
    def config(self) -> TafConfig:
        return TafConfig(self.rho, self.theta_ms)

    def fit(self, X=None, y=None):
        self.config  # validates
        return self

    def transform(self, X):
        cfg = self.config
        X = check_traces(X)
        out = np.empty((len(X), 3, 2, cfg.rho), dtype=self.dtype)
        for i, trace in enumerate(X):
            out[i] = extract_taf(trace, cfg)
        return out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class IntervalTransformer(TransformerMixin, BaseEstimator):
    """Traces to ``(N, n, 2)`` interval packet counts."""

    def __init__(self, n=100):
        self.n = n

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_traces(X)
        return np.stack([extract_interval_features(t, self.n) for t in X]).astype(np.float64)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


def check_traces(X, allow_empty_list=False) -> list[PacketTrace]:
    """Validate an iterable of traces (the analogue of ``check_array``)."""
    if isinstance(X, PacketTrace):
        raise TypeError("expected a sequence of PacketTrace, got a single trace")
    traces = list(getattr(X, "traces", X))
    if not traces and not allow_empty_list:
        raise ValueError("expected at least one trace")
    for i, t in enumerate(traces):
        if not isinstance(t, PacketTrace):
            raise TypeError(f"element {i} is {type(t).__name__}, not PacketTrace")
    return traces


# ---------------------------------------------------------------------------
# on-disk feature cache


def save_feature_cache(path, features: np.ndarray, trace_ids, cfg: TafConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), features)
    index = {
        "rho": cfg.rho,
        "theta_ms": cfg.theta_ms,
        "shape": list(features.shape),
        "index": {tid: row for row, tid in enumerate(trace_ids)},
    }
    path.with_suffix(".json").write_text(json.dumps(index))
    return path.with_suffix(".npy")


def load_feature_cache(path, cfg: TafConfig):
    """Return ``(features, {trace_id: row})`` or ``None`` if missing or stale."""
    path = Path(path)
    meta_path, arr_path = path.with_suffix(".json"), path.with_suffix(".npy")
    if not meta_path.exists() or not arr_path.exists():
        return None
    meta = json.loads(meta_path.read_text())
    if meta["rho"] != cfg.rho or float(meta["theta_ms"]) != float(cfg.theta_ms):
        return None
    return np.load(arr_path), meta["index"]
