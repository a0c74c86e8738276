"""Per-interval Shapley importances and website temporal profiles.

Importances are Shapley values of the interval-count features with respect to
an auxiliary classifier's probability for the true site.  A feature that is
"absent" has its counts replaced by zeros.  For ``n <= exact_max`` intervals
all subsets are enumerated; above that, permutations are sampled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .features import extract_interval_features
from .traces import Dataset, PacketTrace


@dataclass(frozen=True)
class AttributionConfig:
    n: int = 100
    mu: float = 0.3
    lam: float = 0.6
    num_samples: int = 200
    traces_per_site: int = 10
    exact_max: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.mu <= self.lam <= 1.0:
            raise ValueError(f"need 0 <= mu <= lam <= 1, got mu={self.mu}, lam={self.lam}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.traces_per_site < 1:
            raise ValueError("traces_per_site must be >= 1")


# ---------------------------------------------------------------------------
# auxiliary classifier


class AttributionTarget(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression over log-scaled interval counts.

    Input is an ``(N, n, 2)`` array of interval features.
    """

    def __init__(self, C=1.0, max_iter=2000):
        self.C = C
        self.max_iter = max_iter

    def _design(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != 2:
            raise ValueError(f"expected interval features of shape (N, n, 2), got {X.shape}")
        if hasattr(self, "n_intervals_") and X.shape[1] != self.n_intervals_:
            raise ValueError(
                f"model trained on n={self.n_intervals_} intervals, got n={X.shape[1]}"
            )
        return np.log1p(X.reshape(len(X), -1))

    def fit(self, X, y):
        y = np.asarray(y)
        if len(np.unique(y)) < 2:
            raise ValueError("attribution target needs at least two sites to train")
        X = np.asarray(X, dtype=np.float64)
        self.n_intervals_ = X.shape[1]
        self.clf_ = LogisticRegression(C=self.C, max_iter=self.max_iter)
        self.clf_.fit(self._design(X), y)
        self.classes_ = self.clf_.classes_
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "clf_")
        return self.clf_.predict_proba(self._design(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def save(self, path) -> Path:
        check_is_fitted(self, "clf_")
        data = {
            "params": self.get_params(),
            "n_intervals": int(self.n_intervals_),
            "classes": self.classes_.tolist(),
            "coef": self.clf_.coef_.tolist(),
            "intercept": self.clf_.intercept_.tolist(),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "AttributionTarget":
        data = json.loads(Path(path).read_text())
        model = cls(**data["params"])
        clf = LogisticRegression(C=model.C, max_iter=model.max_iter)
        clf.classes_ = np.asarray(data["classes"])
        clf.coef_ = np.asarray(data["coef"], dtype=np.float64)
        clf.intercept_ = np.asarray(data["intercept"], dtype=np.float64)
        clf.n_features_in_ = clf.coef_.shape[1]
        model.clf_, model.classes_, model.n_intervals_ = clf, clf.classes_, data["n_intervals"]
        return model


def train_attribution_target(train: Dataset, cfg: AttributionConfig = AttributionConfig(), seed=None):
    """Fit the auxiliary classifier on the monitored traces of ``train``.

    ``seed`` is accepted for interface symmetry; the lbfgs fit is deterministic.
    """
    traces = [t for t in train.traces if t.is_monitored and len(t)]
    labels = [t.label for t in traces]
    if len(set(labels)) < 2:
        raise ValueError("train must contain at least two monitored sites")
    X = np.stack([extract_interval_features(t, cfg.n) for t in traces])
    return AttributionTarget().fit(X, labels)


# ---------------------------------------------------------------------------
# Shapley estimation


def _exact_shapley(value_fn, n):
    codes = np.arange(1 << n)
    bits = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
    values = np.asarray(value_fn(bits), dtype=np.float64)
    sizes = bits.sum(axis=1)
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = np.array([fact[s] * fact[n - s - 1] / fact[n] if s < n else 0.0 for s in range(n + 1)])
    phi = np.empty(n)
    for i in range(n):
        without = codes[~bits[:, i]]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def _sampled_shapley(value_fn, n, num_samples, rng, chunk=64):
    total = np.zeros(n)
    done = 0
    while done < num_samples:
        m = min(chunk, num_samples - done)
        # antithetic pairs: each permutation is followed by its reverse
        half = np.stack([rng.permutation(n) for _ in range((m + 1) // 2)])
        perms = np.stack([half, half[:, ::-1]], axis=1).reshape(-1, n)[:m]
        # masks[p, k] = first k elements of permutation p present
        rank = np.empty_like(perms)
        rank[np.arange(m)[:, None], perms] = np.arange(n)
        masks = rank[:, None, :] < np.arange(n + 1)[None, :, None]
        values = np.asarray(value_fn(masks.reshape(-1, n)), dtype=np.float64).reshape(m, n + 1)
        gains = np.diff(values, axis=1)
        np.add.at(total, perms.ravel(), gains.ravel())
        done += m
    return total / num_samples


def shapley_values(
    value_fn: Callable[[np.ndarray], np.ndarray],
    n: int,
    num_samples: int = 200,
    rng=None,
    exact_max: int = 12,
) -> np.ndarray:
    """Shapley values of a set function given as a batched mask evaluator.

    ``value_fn`` receives a boolean array of shape ``(k, n)`` (True = feature
    present) and returns ``k`` values.  Exact enumeration is used when
    ``n <= exact_max``; otherwise ``num_samples`` random permutations.
    """
    if n <= exact_max:
        return _exact_shapley(value_fn, n)
    rng = np.random.default_rng(rng)
    return _sampled_shapley(value_fn, n, num_samples, rng)


def masked_value_fn(model, x: np.ndarray, label):
    x = np.asarray(x, dtype=np.float64)
    classes = list(model.classes_)
    if label not in classes:
        raise ValueError(f"label {label!r} unknown to the attribution target")
    col = classes.index(label)

    def value(masks):
        return model.predict_proba(x[None, :, :] * masks[:, :, None])[:, col]

    return value


def shap_importance(model, x: np.ndarray, label, cfg: AttributionConfig = AttributionConfig(), rng=None):
    """Shapley importance of each interval of ``x`` for ``P(label | x)``."""
    x = np.asarray(x)
    n_model = getattr(model, "n_intervals_", x.shape[0])
    if x.ndim != 2 or x.shape[0] != n_model or x.shape[1] != 2:
        raise ValueError(f"interval feature shape {x.shape} does not match model n={n_model}")
    if rng is None:
        rng = cfg.seed
    return shapley_values(
        masked_value_fn(model, x, label),
        x.shape[0],
        num_samples=cfg.num_samples,
        rng=rng,
        exact_max=cfg.exact_max,
    )


# ---------------------------------------------------------------------------
# temporal profiles


@dataclass
class TemporalProfile:
    site: str
    mean_importance: np.ndarray
    cdf: np.ndarray

    @property
    def n(self) -> int:
        return len(self.mean_importance)

    @classmethod
    def from_importance(cls, site, importance):
        w = np.clip(np.asarray(importance, dtype=np.float64), 0.0, None)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            w = np.full(len(w), 1.0 / len(w))
        else:
            w = w / total
        cdf = np.cumsum(w)
        cdf[-1] = 1.0
        return cls(site, w, np.minimum(cdf, 1.0))


@dataclass(frozen=True)
class EffectiveRange:
    site: str
    s: int
    t: int

    def __post_init__(self):
        if not 1 <= self.s <= self.t <= 100:
            raise ValueError(f"invalid effective range ({self.s}, {self.t}) for {self.site!r}")


def website_temporal_profile(model, traces: Sequence[PacketTrace], cfg=AttributionConfig(), rng=None):
    """Average clamped importances of several traces of one site."""
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    labels = {t.label for t in traces}
    if len(labels) != 1:
        raise ValueError(f"traces carry mixed labels: {sorted(labels)}")
    site = labels.pop()
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    phis = [
        np.clip(shap_importance(model, extract_interval_features(t, cfg.n), site, cfg, rng), 0, None)
        for t in traces
    ]
    return TemporalProfile.from_importance(site, np.mean(phis, axis=0))


def loading_percent(index: int, n: int) -> int:
    """Loading percent reached at the end of 0-based interval ``index``."""
    return max(1, math.ceil(100 * (index + 1) / n))


def effective_range(profile: TemporalProfile, mu=0.3, lam=0.6, tol=1e-9) -> EffectiveRange:
    cdf = np.asarray(profile.cdf)
    s_idx = int(np.argmax(cdf >= mu - tol))
    t_idx = int(np.argmax(cdf >= lam - tol))
    return EffectiveRange(profile.site, loading_percent(s_idx, len(cdf)), loading_percent(t_idx, len(cdf)))


def temporal_profiles(model, train: Dataset, cfg: AttributionConfig = AttributionConfig()):
    """Profile every monitored site from ``cfg.traces_per_site`` random traces."""
    rng = np.random.default_rng(cfg.seed)
    groups = train.by_site()
    out = {}
    for site in sorted(groups):
        if site not in train.sites:
            continue
        members = groups[site]
        k = min(cfg.traces_per_site, len(members))
        pick = sorted(rng.choice(len(members), size=k, replace=False))
        out[site] = website_temporal_profile(model, [members[i] for i in pick], cfg, rng)
    return out


def save_temporal_profiles(profiles, ranges, path) -> Path:
    rows = []
    for site in sorted(profiles):
        p, r = profiles[site], ranges[site]
        rows.append(
            {
                "site": site,
                "n": p.n,
                "mean_importance": p.mean_importance.tolist(),
                "cdf": p.cdf.tolist(),
                "s": r.s,
                "t": r.t,
            }
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, indent=1) + "\n")
    return path


def load_temporal_profiles(path):
    rows = json.loads(Path(path).read_text())
    profiles, ranges = {}, {}
    for row in rows:
        profiles[row["site"]] = TemporalProfile(
            row["site"], np.asarray(row["mean_importance"]), np.asarray(row["cdf"])
        )
        ranges[row["site"]] = EffectiveRange(row["site"], int(row["s"]), int(row["t"]))
    return profiles, ranges


def export_heatmap_csv(profiles, path) -> Path:
    """Site-by-interval importance table (one row per site)."""
    path = Path(path)
    sites = sorted(profiles)
    n = profiles[sites[0]].n if sites else 0
    lines = ["site," + ",".join(str(i + 1) for i in range(n))]
    for s in sites:
        lines.append(s + "," + ",".join(f"{v:.6g}" for v in profiles[s].mean_importance))
    path.write_text("\n".join(lines) + "\n")
    return path
