"""Scoring of identification verdicts.

Counts are one-vs-rest per monitored site.  ``"unmonitored"`` is never a
scored class, but unmonitored traces that are claimed by a site count as that
site's false positives (tracked separately for r-precision).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .identifier import EngineConfig, batch_replay
from .traces import UNMONITORED

NO_PREDICTION = "<none>"


@dataclass
class ConfusionCounts:
    sites: list
    tp: dict
    fp: dict
    tn: dict
    fn: dict
    fp_monitored: dict
    fp_unmonitored: dict
    total: int
    correct: int

    def row(self, site):
        return self.tp[site], self.fp[site], self.tn[site], self.fn[site]


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    p_at_min: float
    r_precision: float
    per_site: dict = field(default_factory=dict)
    mean_decision_time: float = math.nan
    mean_loading_ratio: float = math.nan
    total: int = 0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_site")
        return d


def confusion(predictions, truths, sites=None) -> ConfusionCounts:
    predictions = [NO_PREDICTION if p is None else str(p) for p in predictions]
    truths = [str(t) for t in truths]
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions but {len(truths)} truths")
    if sites is None:
        sites = {t for t in truths if t != UNMONITORED} | {
            p for p in predictions if p not in (UNMONITORED, NO_PREDICTION)
        }
    sites = sorted(sites)
    pred = np.asarray(predictions, dtype=object)
    true = np.asarray(truths, dtype=object)
    unmon = true == UNMONITORED
    tp, fp, tn, fn, fpm, fpu = {}, {}, {}, {}, {}, {}
    n = len(true)
    for s in sites:
        p, t = pred == s, true == s
        tp[s] = int(np.sum(p & t))
        fp[s] = int(np.sum(p & ~t))
        fn[s] = int(np.sum(~p & t))
        tn[s] = n - tp[s] - fp[s] - fn[s]
        fpu[s] = int(np.sum(p & unmon))
        fpm[s] = fp[s] - fpu[s]
    correct = int(np.sum(pred == true))
    return ConfusionCounts(sites, tp, fp, tn, fn, fpm, fpu, n, correct)


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def r_precision(c: ConfusionCounts, r: float = 20) -> float:
    """Macro precision with unmonitored-origin false positives weighted ``r`` times."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if not c.sites:
        return 0.0
    vals = [
        _ratio(c.tp[s], c.tp[s] + c.fp_monitored[s] + r * c.fp_unmonitored[s]) for s in c.sites
    ]
    return float(np.mean(vals))


def metrics(c: ConfusionCounts, r: float = 20) -> MetricReport:
    per_site = {}
    for s in c.sites:
        tp, fp, tn, fn = c.row(s)
        p = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        per_site[s] = {
            "tp": tp,
            "fp": fp,
            "tn": tn,
            "fn": fn,
            "fp_unmonitored": c.fp_unmonitored[s],
            "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
            "precision": p,
            "recall": rec,
            "f1": _ratio(2 * p * rec, p + rec),
        }
    macro = lambda key: float(np.mean([v[key] for v in per_site.values()])) if per_site else 0.0
    return MetricReport(
        accuracy=_ratio(c.correct, c.total),
        precision=macro("precision"),
        recall=macro("recall"),
        f1=macro("f1"),
        p_at_min=min((v["precision"] for v in per_site.values()), default=0.0),
        r_precision=r_precision(c, r),
        per_site=per_site,
        total=c.total,
    )


def evaluate_verdicts(verdicts, sites=None, r: float = 20) -> MetricReport:
    c = confusion([v.label for v in verdicts], [v.truth for v in verdicts], sites)
    report = metrics(c, r)
    ok = [v for v in verdicts if v.label is not None]
    if ok:
        report.mean_decision_time = float(np.mean([v.decision_time for v in ok]))
        report.mean_loading_ratio = float(np.mean([v.loading_ratio for v in ok]))
    return report


SWEEP_FIELDS = ("ratio", "accuracy", "precision", "recall", "f1", "p_at_min", "r_precision", "total")


def early_stage_sweep(profiles, model, test, ratios, cfg: EngineConfig = EngineConfig(), sites=None):
    """One metrics row per loading ratio, using fixed-ratio replay."""
    rows = []
    for ratio in ratios:
        if not 0 < ratio <= 1:
            raise ValueError(f"ratios must lie in (0, 1], got {ratio}")
        verdicts = batch_replay(profiles, model, test, cfg, ratio=ratio)
        rep = evaluate_verdicts(verdicts, sites if sites is not None else profiles.sites)
        rows.append({"ratio": ratio, **{k: getattr(rep, k) for k in SWEEP_FIELDS[1:]}})
    return rows


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in SWEEP_FIELDS})
    return path


def write_report(report: MetricReport, directory, stem="report") -> tuple[Path, Path]:
    """Per-site CSV table plus a JSON summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / f"{stem}_per_site.csv"
    cols = ["site", "tp", "fp", "tn", "fn", "fp_unmonitored", "accuracy", "precision", "recall", "f1"]
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for site, row in sorted(report.per_site.items()):
            w.writerow([site] + [row[c] for c in cols[1:]])
    summary = directory / f"{stem}_summary.json"
    summary.write_text(json.dumps(report.summary(), indent=2, default=float) + "\n")
    return table, summary


def plot_sweep(rows, path, metric="accuracy"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([100 * r["ratio"] for r in rows], [r[metric] for r in rows], marker="o")
    ax.set_xlabel("loading ratio (%)")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
