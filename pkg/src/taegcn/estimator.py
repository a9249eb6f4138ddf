"""Scikit-learn style wrapper around the network and training loop.

The constructor only records hyperparameters (the sklearn clone contract);
everything stateful lands in trailing-underscore attributes during fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import chronological_split, compute_norm_stats, make_windows, normalize
from .errors import ConfigError
from .graph_learner import extract_static_features
from .network import ModelConfig
from .training import TrainConfig, build_ablation, evaluate, fit, predict_windows
from .validation import as_series, check_horizon_fits, check_is_fitted

__all__ = ["TaegcnForecaster"]


class TaegcnForecaster(BaseEstimator):
    """Spatio-temporal forecaster with a learned, time-varying node graph.

    ``fit`` takes one multivariate series [nodes, steps, channels] (or a
    SeriesDataset), splits it chronologically, trains on sliding windows,
    and keeps the weights of the best validation epoch. ``predict`` then
    forecasts ``horizon`` steps of the target channel after every window
    of a given series. ``variant`` selects the full model or one of the
    reduced forms ("ablate_tmsa", "ablate_egc").
    """

    def __init__(self, layers=4, windows=(1, 3, 6, 12), window_assignment="per_layer",
                 heads=4, hidden_channels=32, state_dim=16, period=3,
                 input_length=12, horizon=3, skip_channels=64, head_hidden=256,
                 target_channel=0, variant="full", lr=1e-4, weight_decay=1e-4,
                 batch_size=8, epochs=40, shuffle=True, patience=None,
                 grad_clip=None, split_fractions=(0.7, 0.1, 0.2),
                 missing_marker=0.0, random_state=0):
        self.layers = layers
        self.windows = windows
        self.window_assignment = window_assignment
        self.heads = heads
        self.hidden_channels = hidden_channels
        self.state_dim = state_dim
        self.period = period
        self.input_length = input_length
        self.horizon = horizon
        self.skip_channels = skip_channels
        self.head_hidden = head_hidden
        self.target_channel = target_channel
        self.variant = variant
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.shuffle = shuffle
        self.patience = patience
        self.grad_clip = grad_clip
        self.split_fractions = split_fractions
        self.missing_marker = missing_marker
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, windows=self.windows,
                           window_assignment=self.window_assignment,
                           heads=self.heads, hidden_channels=self.hidden_channels,
                           state_dim=self.state_dim, period=self.period,
                           input_length=self.input_length, horizon=self.horizon,
                           skip_channels=self.skip_channels,
                           head_hidden=self.head_hidden,
                           target_channel=self.target_channel,
                           seed=self.random_state)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, shuffle=self.shuffle,
                           patience=self.patience, grad_clip=self.grad_clip)

    def _windows_of(self, dataset, role):
        check_horizon_fits(dataset, self.input_length, self.horizon, role)
        scaled = normalize(dataset, self.norm_stats_)
        return make_windows(scaled, self.input_length, self.horizon,
                            target_channel=self.target_channel,
                            target_source=dataset)

    def fit(self, X, y=None):
        """Train on one series; ``y`` is ignored (targets come from X)."""
        config = self._model_config()
        train_config = self._train_config()
        series = as_series(X, missing_marker=self.missing_marker)
        if self.target_channel >= series.n_channels:
            raise ConfigError(f"target channel {self.target_channel} out of "
                              f"range for {series.n_channels} channel(s)")
        train, val, _ = chronological_split(series, tuple(self.split_fractions))
        self.norm_stats_ = compute_norm_stats(train)
        train_windows = self._windows_of(train, "training")
        val_windows = self._windows_of(val, "validation")

        self.model_ = build_ablation(self.variant, config, series.n_channels)
        self.model_.set_static_features(
            extract_static_features(normalize(train, self.norm_stats_)))
        self.history_ = fit(self.model_, train_windows, val_windows,
                            train_config, self.norm_stats_)
        self.n_features_in_ = series.n_channels
        return self

    def predict(self, X) -> np.ndarray:
        """Forecasts for every sliding window of X, [windows, nodes, horizon]."""
        check_is_fitted(self)
        series = as_series(X, missing_marker=self.missing_marker)
        windows = self._windows_of(series, "prediction")
        return predict_windows(self.model_, windows, self.norm_stats_,
                               batch_size=self.batch_size)

    def score(self, X, y=None) -> float:
        """Negative masked MAE over the windows of X (higher is better)."""
        check_is_fitted(self)
        series = as_series(X, missing_marker=self.missing_marker)
        windows = self._windows_of(series, "scoring")
        report = evaluate(self.model_, windows, self.norm_stats_,
                          batch_size=self.batch_size,
                          missing_marker=self.missing_marker)
        return -report.aggregate_mae

    def evaluate(self, X):
        """Full per-step metric report over the windows of X."""
        check_is_fitted(self)
        series = as_series(X, missing_marker=self.missing_marker)
        windows = self._windows_of(series, "evaluation")
        return evaluate(self.model_, windows, self.norm_stats_,
                        batch_size=self.batch_size,
                        missing_marker=self.missing_marker)
