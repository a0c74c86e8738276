"""scikit-learn style front end for the whole pipeline.

``EarlyStageIdentifier.fit`` runs attribution, tail-mask augmentation,
contrastive encoder training and website profiling; ``predict`` labels
traces (optionally cut to a loading ratio) and ``transform`` returns
embeddings.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attribution import (
    AttributionConfig,
    effective_range,
    temporal_profiles,
    train_attribution_target,
)
from .augmentation import AugmentConfig, augment_dataset
from .encoder import EncoderConfig, train_encoder
from .features import TafConfig, check_traces
from .identifier import CLOSED_WORLD, OPEN_WORLD, EngineConfig, batch_replay
from .profiling import build_profiles
from .traces import Dataset

logger = logging.getLogger(__name__)


class EarlyStageIdentifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Identify websites from early traffic prefixes.

    Parameters mirror the pipeline stages; defaults follow the reference
    parameter table except for training length, which is plumbing.

    Parameters
    ----------
    mu, lam : float
        Lower/upper cumulative-importance bounds of the effective loading range.
    alpha : int
        Tail-masked copies per training trace.
    rho, theta_ms : int, float
        Number and length (ms) of TAF windows.
    eta, gamma : int, float
        Embedding size and contrastive temperature.
    tau, sigma, epsilon : float
        Engine tick, maximum collection time (s) and drift threshold.
    mode : {"open_world", "closed_world"}
        Closed world disables rejection (``epsilon = inf``).
    conv2d_channels, conv1d_channels, window_pool, dropout
        Encoder architecture knobs.
    """

    def __init__(
        self,
        mu=0.3,
        lam=0.6,
        alpha=2,
        rho=2000,
        theta_ms=80.0,
        eta=128,
        gamma=0.1,
        tau=0.12,
        sigma=80.0,
        epsilon=0.01,
        mode=OPEN_WORLD,
        n_intervals=100,
        shap_samples=200,
        traces_per_site=10,
        conv2d_channels=(32, 64),
        conv1d_channels=(64, 128, 128, 128),
        window_pool=4,
        dropout=0.1,
        epochs=30,
        lr=1e-3,
        batch_size=64,
        per_site=4,
        random_state=0,
    ):
        self.mu = mu
        self.lam = lam
        self.alpha = alpha
        self.rho = rho
        self.theta_ms = theta_ms
        self.eta = eta
        self.gamma = gamma
        self.tau = tau
        self.sigma = sigma
        self.epsilon = epsilon
        self.mode = mode
        self.n_intervals = n_intervals
        self.shap_samples = shap_samples
        self.traces_per_site = traces_per_site
        self.conv2d_channels = conv2d_channels
        self.conv1d_channels = conv1d_channels
        self.window_pool = window_pool
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.per_site = per_site
        self.random_state = random_state

    # -- configs ---------------------------------------------------------

    def attribution_config(self) -> AttributionConfig:
        return AttributionConfig(
            n=self.n_intervals,
            mu=self.mu,
            lam=self.lam,
            num_samples=self.shap_samples,
            traces_per_site=self.traces_per_site,
            seed=self.random_state,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            eta=self.eta,
            gamma=self.gamma,
            rho=self.rho,
            theta_ms=self.theta_ms,
            conv2d_channels=tuple(self.conv2d_channels),
            conv1d_channels=tuple(self.conv1d_channels),
            window_pool=self.window_pool,
            dropout=self.dropout,
        )

    def engine_config(self, mode=None) -> EngineConfig:
        return EngineConfig(
            tau=self.tau,
            sigma=self.sigma,
            epsilon=self.epsilon,
            mode=mode or self.mode,
            taf=TafConfig(self.rho, self.theta_ms),
        )

    # -- fitting ---------------------------------------------------------

    def fit(self, X, y=None):
        traces = check_traces(X)
        if y is not None:
            y = np.asarray(y)
            if len(y) != len(traces):
                raise ValueError(f"{len(traces)} traces but {len(y)} labels")
            traces = [t.replace(label=str(lbl)) for t, lbl in zip(traces, y)]
        train = Dataset.from_traces([t for t in traces if t.is_monitored], role="train")
        if len(train.sites) < 2:
            raise ValueError("fit needs monitored traces from at least two sites")
        self.engine_config()  # validate before the expensive part

        acfg = self.attribution_config()
        self.attribution_target_ = train_attribution_target(train, acfg)
        self.temporal_profiles_ = temporal_profiles(self.attribution_target_, train, acfg)
        self.effective_ranges_ = {
            s: effective_range(p, self.mu, self.lam) for s, p in self.temporal_profiles_.items()
        }
        logger.info("effective ranges: %s", {s: (r.s, r.t) for s, r in self.effective_ranges_.items()})

        augmented = augment_dataset(
            train, AugmentConfig(self.alpha, self.effective_ranges_, self.random_state)
        )
        self.encoder_ = train_encoder(
            augmented,
            self.encoder_config(),
            epochs=self.epochs,
            lr=self.lr,
            seed=self.random_state,
            batch_size=self.batch_size,
            per_site=self.per_site,
        )
        self.profiles_ = build_profiles(self.encoder_, augmented)
        self.classes_ = np.array(self.profiles_.sites)
        return self

    # -- inference -------------------------------------------------------

    def predict_verdicts(self, X, ratio=None, mode=None):
        """Full verdicts; ``ratio=None`` replays each trace on the engine clock."""
        check_is_fitted(self, "profiles_")
        return batch_replay(self.profiles_, self.encoder_, check_traces(X), self.engine_config(mode), ratio)

    def predict(self, X, ratio=1.0, mode=None):
        return np.array([v.label for v in self.predict_verdicts(X, ratio, mode)], dtype=object)

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return self.encoder_.embed_traces(check_traces(X))

    def score(self, X, y=None, sample_weight=None, ratio=1.0):
        traces = check_traces(X)
        y = np.asarray([t.label for t in traces] if y is None else y, dtype=object)
        pred = self.predict(traces, ratio=ratio)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        return float(np.average(pred == y, weights=w))


def closed_world(estimator: EarlyStageIdentifier) -> EarlyStageIdentifier:
    """Switch a fitted estimator's engine to closed-world mode in place."""
    estimator.set_params(mode=CLOSED_WORLD)
    return estimator
