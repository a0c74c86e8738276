"""Website-adaptive tail masking.

Each training trace gets ``alpha`` early-stage copies, each cut at a loading
percent drawn uniformly from its site's effective range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attribution import EffectiveRange
from .traces import Dataset, PacketTrace, trace_rng, truncate_by_ratio


@dataclass
class AugmentConfig:
    alpha: int = 2
    ranges: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


def sample_mask_point(r: EffectiveRange, rng) -> int:
    return int(rng.integers(r.s, r.t + 1))


def augment_trace(trace: PacketTrace, l: int, tag=None) -> PacketTrace:
    """Cut ``trace`` at loading percent ``l`` (1..100)."""
    if not 1 <= l <= 100:
        raise ValueError(f"mask point must be in [1, 100], got {l}")
    cut = truncate_by_ratio(trace, l / 100.0)
    suffix = f"#m{l}" if tag is None else f"#a{tag}m{l}"
    return cut.replace(trace_id=trace.trace_id + suffix)


def augment_dataset(train: Dataset, cfg: AugmentConfig) -> Dataset:
    """Originals followed by ``alpha`` masked variants per trace.

    Unmonitored traces (if any) are passed through without variants.
    """
    if cfg.alpha == 0:
        return train
    missing = sorted({t.label for t in train.traces if t.is_monitored} - set(cfg.ranges))
    if missing:
        raise KeyError(f"no effective range for site(s): {', '.join(missing)}")
    extra = []
    for trace in train.traces:
        if not trace.is_monitored:
            continue
        rng = trace_rng(cfg.seed, trace.trace_id)
        r = cfg.ranges[trace.label]
        for k in range(cfg.alpha):
            extra.append(augment_trace(trace, sample_mask_point(r, rng), tag=k))
    return Dataset(train.traces + tuple(extra), train.sites, train.role)
