import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlywf.attribution import (
    AttributionConfig,
    AttributionTarget,
    EffectiveRange,
    TemporalProfile,
    effective_range,
    load_temporal_profiles,
    save_temporal_profiles,
    shap_importance,
    shapley_values,
    train_attribution_target,
    website_temporal_profile,
)
from earlywf.features import extract_interval_features
from earlywf.traces import PacketTrace, SynthSpec, split_dataset, synth_dataset


def brute_force_shapley(v, n):
    """Textbook subset sum; ``v`` takes a frozenset of present features."""
    phi = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for k in range(n):
            w = math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
            for S in itertools.combinations(others, k):
                S = frozenset(S)
                phi[i] += w * (v(S | {i}) - v(S))
    return phi


def batched(v):
    return lambda masks: np.array([v(frozenset(np.flatnonzero(m))) for m in masks])


def game(n, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=n)
    pair = rng.normal(size=(n, n)) * 0.3
    return lambda S: float(np.tanh(sum(w[i] for i in S) + sum(pair[i, j] for i in S for j in S if i < j)))


class TestShapley:
    def test_null_model(self):
        phi = shapley_values(lambda m: np.full(len(m), 0.7), 5)
        assert np.array_equal(phi, np.zeros(5))

    def test_additive_recovers_weights(self):
        w = np.array([0.5, -1.25, 2.0])
        phi = shapley_values(lambda m: m @ w, 3)
        np.testing.assert_allclose(phi, w, atol=1e-12)

    @pytest.mark.parametrize("n,seed", [(3, 0), (5, 1), (7, 2)])
    def test_exact_matches_brute_force(self, n, seed):
        v = game(n, seed)
        np.testing.assert_allclose(shapley_values(batched(v), n), brute_force_shapley(v, n), atol=1e-12)

    @pytest.mark.parametrize("n,seed", [(4, 3), (8, 4)])
    def test_efficiency(self, n, seed):
        v = game(n, seed)
        phi = shapley_values(batched(v), n)
        assert abs(phi.sum() - (v(frozenset(range(n))) - v(frozenset()))) < 1e-6

    def test_symmetry_and_dummy(self):
        # features 0 and 1 interchangeable, feature 3 never matters
        v = lambda S: float((0 in S) + (1 in S) + 2 * ((0 in S) and (2 in S)) + 2 * ((1 in S) and (2 in S)))
        phi = shapley_values(batched(v), 4)
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)
        assert phi[3] == 0.0

    def test_sampling_converges(self):
        n = 8
        v = game(n, 7)
        exact = shapley_values(batched(v), n)
        est = shapley_values(batched(v), n, num_samples=2000, rng=0, exact_max=0)
        assert np.mean(np.abs(est - exact)) < 0.02 * np.max(np.abs(exact))

    def test_sampling_is_unbiased_for_additive(self):
        w = np.arange(20, dtype=float)
        est = shapley_values(lambda m: m @ w, 20, num_samples=3, rng=1)
        np.testing.assert_allclose(est, w)


@pytest.fixture(scope="module")
def small_world():
    d = synth_dataset(SynthSpec(num_sites=2, traces_per_site=30, seed=11))
    return split_dataset(d, seed=0)


class TestTarget:
    def test_separable_sites(self, small_world):
        train, val, _ = small_world
        cfg = AttributionConfig(n=20)
        model = train_attribution_target(train, cfg)
        X = np.stack([extract_interval_features(t, 20) for t in val])
        assert model.score(X, val.labels) == 1.0
        p = model.predict_proba(X)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        again = train_attribution_target(train, cfg)
        np.testing.assert_array_equal(again.clf_.coef_, model.clf_.coef_)

    def test_one_class_rejected(self, small_world):
        train = small_world[0]
        with pytest.raises(ValueError):
            AttributionTarget().fit(np.zeros((4, 5, 2)), ["a"] * 4)
        with pytest.raises(ValueError):
            train_attribution_target(train.monitored().__class__.from_traces(
                [t for t in train if t.label == "site000"]))

    def test_shape_mismatch(self, small_world):
        model = train_attribution_target(small_world[0], AttributionConfig(n=10))
        with pytest.raises(ValueError):
            shap_importance(model, np.zeros((12, 2)), "site000", AttributionConfig(n=12))

    def test_shap_importance_efficiency(self, small_world):
        cfg = AttributionConfig(n=8)
        model = train_attribution_target(small_world[0], cfg)
        trace = small_world[1].traces[0]
        x = extract_interval_features(trace, 8)
        phi = shap_importance(model, x, trace.label, cfg)
        col = list(model.classes_).index(trace.label)
        full = model.predict_proba(x[None])[0, col]
        empty = model.predict_proba(np.zeros((1, 8, 2)))[0, col]
        assert abs(phi.sum() - (full - empty)) < 1e-6

    def test_temporal_profile(self, small_world):
        cfg = AttributionConfig(n=20, num_samples=50)
        model = train_attribution_target(small_world[0], cfg)
        site_traces = [t for t in small_world[0] if t.label == "site001"][:3]
        prof = website_temporal_profile(model, site_traces, cfg)
        assert prof.mean_importance.min() >= 0
        assert prof.cdf[-1] == 1.0 and np.all(np.diff(prof.cdf) >= 0)
        with pytest.raises(ValueError):
            website_temporal_profile(model, [small_world[0].traces[0], site_traces[0]]
                                     if small_world[0].traces[0].label != "site001"
                                     else [site_traces[0], PacketTrace([0.0], [1], "site000")], cfg)


class TestProfiles:
    def test_normalization(self):
        p = TemporalProfile.from_importance("a", [0.2, 0.8])
        np.testing.assert_allclose(p.mean_importance, [0.2, 0.8])
        np.testing.assert_allclose(p.cdf, [0.2, 1.0])

    def test_clamp(self):
        np.testing.assert_allclose(TemporalProfile.from_importance("a", [-1, 1]).mean_importance, [0, 1])

    def test_zero_fallback(self):
        np.testing.assert_allclose(TemporalProfile.from_importance("a", [0, 0, 0, 0]).mean_importance, 0.25)

    def test_uniform_range(self):
        r = effective_range(TemporalProfile.from_importance("a", np.ones(100)), 0.3, 0.6)
        assert (r.s, r.t) == (30, 60)

    def test_point_mass(self):
        r = effective_range(TemporalProfile.from_importance("a", [1.0] + [0.0] * 9), 0.3, 0.6)
        assert (r.s, r.t) == (10, 10)

    def test_equal_bounds(self):
        r = effective_range(TemporalProfile.from_importance("a", np.arange(1, 51)), 0.45, 0.45)
        assert r.s == r.t

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=60), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_bounds(self, w, a, b, c):
        p = TemporalProfile.from_importance("a", w)
        lo, mid, hi = sorted((a, b, c))
        r1, r2 = effective_range(p, lo, mid), effective_range(p, mid, hi)
        assert 1 <= r1.s <= r1.t <= 100
        assert r1.s <= r2.s and r1.t <= r2.t

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            EffectiveRange("a", 0, 10)
        with pytest.raises(ValueError):
            AttributionConfig(mu=0.7, lam=0.6)

    def test_json_roundtrip(self, tmp_path):
        p = TemporalProfile.from_importance("a", [1, 2, 3, 4])
        r = effective_range(p)
        path = save_temporal_profiles({"a": p}, {"a": r}, tmp_path / "tp.json")
        profiles, ranges = load_temporal_profiles(path)
        np.testing.assert_array_equal(profiles["a"].cdf, p.cdf)
        assert ranges["a"] == r


def test_target_roundtrip(tmp_path, small_world):
    model = train_attribution_target(small_world[0], AttributionConfig(n=10))
    back = AttributionTarget.load(model.save(tmp_path / "target.json"))
    X = np.stack([extract_interval_features(t, 10) for t in small_world[1]])
    np.testing.assert_allclose(back.predict_proba(X), model.predict_proba(X), atol=1e-12)
    assert back.n_intervals_ == 10
