import numpy as np
import pytest

from earlywf.attribution import EffectiveRange
from earlywf.augmentation import AugmentConfig, augment_dataset, augment_trace, sample_mask_point
from earlywf.traces import SynthSpec, synth_dataset, truncate_by_ratio


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SynthSpec(num_sites=3, traces_per_site=6, seed=5, num_unmonitored_sites=1))


def ranges_for(data, s=20, t=40):
    return {site: EffectiveRange(site, s, t) for site in data.sites}


def test_mask_points_cover_range():
    rng = np.random.default_rng(0)
    draws = {sample_mask_point(EffectiveRange("a", 3, 7), rng) for _ in range(500)}
    assert draws == {3, 4, 5, 6, 7}


def test_full_load_is_identity(data):
    t = data.traces[0]
    out = augment_trace(t, 100)
    assert out.packets == t.packets and out.label == t.label


def test_variant_is_time_prefix(data):
    t = data.traces[1]
    out = augment_trace(t, 30, tag=1)
    assert out.trace_id == t.trace_id + "#a1m30"
    assert out.packets == truncate_by_ratio(t, 0.3).packets
    assert out.duration <= 0.3 * t.duration + 1e-12
    np.testing.assert_array_equal(out.times, t.times[: len(out)])


def test_bad_mask_point(data):
    with pytest.raises(ValueError):
        augment_trace(data.traces[0], 0)
    with pytest.raises(ValueError):
        AugmentConfig(alpha=-1)


def test_dataset_growth_and_determinism(data):
    cfg = AugmentConfig(alpha=2, ranges=ranges_for(data), seed=3)
    out = augment_dataset(data, cfg)
    n_mon = len(data.monitored())
    assert len(out) == len(data) + 2 * n_mon
    assert out.traces[: len(data)] == data.traces
    again = augment_dataset(data, cfg)
    assert [t.trace_id for t in again] == [t.trace_id for t in out]
    for t in out.traces[len(data):]:
        l = int(t.trace_id.rsplit("m", 1)[1])
        assert 20 <= l <= 40 and t.is_monitored
    assert augment_dataset(data, AugmentConfig(alpha=0)) is data


def test_missing_range(data):
    ranges = ranges_for(data)
    ranges.pop(sorted(ranges)[0])
    with pytest.raises(KeyError):
        augment_dataset(data, AugmentConfig(ranges=ranges))
