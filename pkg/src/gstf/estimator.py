"""Scikit-learn style front end for the fusion forecaster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import ForecastBatch, metrics
from .graph import load_graph
from .model import GSTFConfig, GSTFModel
from .training import TrainConfig, evaluate, fit


def _check_windows(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n_windows, steps, n_sensors, n_channels), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def _calendar(index, shape):
    if index is None:
        return np.ones(shape, dtype=np.int64)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != shape:
        raise ValueError(f"calendar index shape {index.shape} != {shape}")
    return index


class GSTFForecaster(RegressorMixin, BaseEstimator):
    """Anomaly-aware spatio-temporal fusion forecaster.

    ``X`` holds history windows ``(n_windows, alpha, n_sensors, n_channels)``
    and ``y`` the matching horizons ``(n_windows, beta, n_sensors,
    n_channels)``. Anomaly labels and calendar indices travel as fit/predict
    keyword arguments, aligned with ``X``.

    Parameters
    ----------
    adjacency : array-like of shape (n_sensors, n_sensors), default=None
        Road graph; ``None`` means a path graph over the sensors.
    d_model, d_hidden, n_layers, n_prototypes : int
        Width, attention query/key width, fusion layers and anomaly
        prototypes. Defaults 64, 16, 4, 64.
    n_eigvecs : int, default=8
        Laplacian eigenvectors used for the spatial embedding (clipped to the
        number available on small graphs).
    hop_threshold : int, default=2
        Sensors further apart than this many hops do not attend to each other.
    variant : {"full", "w/ST", "w/ext"}, default="full"
        Ablation wiring.
    residual : bool, default=True
        Residual paths around the attention stages.
    eq18_literal : bool, default=False
        Feed the spatial rather than the temporal output to space-time attention.
    lr, batch_size, max_epochs, patience : training settings (0.01, 16, 400, 50).
    max_steps : int, default=None
        Optional cap on optimizer steps.
    random_state : int, default=0
        Seeds initialization and shuffling.
    """

    def __init__(self, adjacency=None, d_model=64, d_hidden=16, n_layers=4, n_prototypes=64,
                 n_eigvecs=8, hop_threshold=2, variant="full", residual=True, eq18_literal=False, lr=0.01,
                 batch_size=16, max_epochs=400, patience=50, min_delta=1e-4, loss="mae",
                 clip_norm=5.0, max_steps=None, random_state=0):
        self.adjacency = adjacency
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.n_layers = n_layers
        self.n_prototypes = n_prototypes
        self.n_eigvecs = n_eigvecs
        self.hop_threshold = hop_threshold
        self.variant = variant
        self.residual = residual
        self.eq18_literal = eq18_literal
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.loss = loss
        self.clip_norm = clip_norm
        self.max_steps = max_steps
        self.random_state = random_state

    def _graph(self, n_sensors):
        if self.adjacency is None:
            return load_graph([(i, i + 1) for i in range(n_sensors - 1)], n_sensors)
        adj = np.asarray(self.adjacency)
        if adj.shape != (n_sensors, n_sensors):
            raise ValueError(f"adjacency shape {adj.shape} does not match {n_sensors} sensors")
        return load_graph(list(zip(*np.nonzero(adj))), n_sensors)

    def _batch(self, X, y=None, anomalies=None, daily_index=None, weekly_index=None):
        X = _check_windows(X)
        exc = np.zeros_like(X) if anomalies is None else np.asarray(anomalies, dtype=np.float64)
        if exc.shape != X.shape:
            raise ValueError(f"anomalies shape {exc.shape} != X shape {X.shape}")
        lead = X.shape[:2]
        y = None if y is None else _check_windows(y, "y")
        return ForecastBatch(X, y, exc, _calendar(daily_index, lead), _calendar(weekly_index, lead))

    def fit(self, X, y, anomalies=None, daily_index=None, weekly_index=None, validation_data=None):
        """Train on windows ``X -> y``.

        ``validation_data`` is a :class:`~gstf.data.ForecastBatch` used for
        early stopping; without it the training windows are reused.
        """
        train = self._batch(X, y, anomalies, daily_index, weekly_index)
        if len(train) < 1 or y is None:
            raise ValueError("need at least one training window with targets")
        _, alpha, n, c = train.x.shape
        config = GSTFConfig(
            n_sensors=n, n_channels=c, alpha=alpha, beta=train.y.shape[1], d_model=self.d_model,
            d_hidden=self.d_hidden, n_layers=self.n_layers, n_prototypes=self.n_prototypes,
            n_eigvecs=self.n_eigvecs, hop_threshold=self.hop_threshold, variant=self.variant,
            residual=self.residual, eq18_literal=self.eq18_literal, seed=self.random_state,
        )
        self.model_ = GSTFModel.from_graph(config, self._graph(n))
        train_cfg = TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=min(self.patience, self.max_epochs), min_delta=self.min_delta,
            seed=self.random_state, loss=self.loss, clip_norm=self.clip_norm, max_steps=self.max_steps,
        )
        _, self.history_ = fit(self.model_, train, validation_data or train, train_cfg)
        self.n_features_in_ = n * c
        return self

    def predict(self, X, anomalies=None, daily_index=None, weekly_index=None):
        check_is_fitted(self, "model_")
        batch = self._batch(X, None, anomalies, daily_index, weekly_index)
        return self.model_.predict(batch.x, batch.exc, batch.daily, batch.weekly)

    def score(self, X, y, sample_weight=None, **kwargs):
        """Negative MAE, so that larger is better."""
        return -metrics(self.predict(X, **kwargs), y)["MAE"]

    def evaluate(self, batch, scaler=None):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, batch, scaler)
