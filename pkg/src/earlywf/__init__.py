"""Early-stage website fingerprinting on packet traces.

Typical use::

    from earlywf import EarlyStageIdentifier, synth_dataset, SynthSpec, split_dataset

    train, val, test = split_dataset(synth_dataset(SynthSpec(num_sites=10)))
    est = EarlyStageIdentifier(epochs=10).fit(train.traces)
    est.predict(test.traces, ratio=0.4)
"""

from .estimator import EarlyStageIdentifier, closed_world
from .evaluation import MetricReport, early_stage_sweep, evaluate_verdicts, metrics
from .features import TafConfig, TafTransformer, extract_taf
from .identifier import EngineConfig, Verdict, batch_replay, replay
from .profiling import ProfileStore, build_profiles
from .traces import Dataset, PacketTrace, SynthSpec, load_dataset, split_dataset, synth_dataset

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EarlyStageIdentifier",
    "EngineConfig",
    "MetricReport",
    "PacketTrace",
    "ProfileStore",
    "SynthSpec",
    "TafConfig",
    "TafTransformer",
    "Verdict",
    "batch_replay",
    "build_profiles",
    "closed_world",
    "early_stage_sweep",
    "evaluate_verdicts",
    "extract_taf",
    "load_dataset",
    "metrics",
    "replay",
    "split_dataset",
    "synth_dataset",
]
