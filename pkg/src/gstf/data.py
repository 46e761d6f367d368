"""Series ingestion, scaling, chronological splits, windowing, metrics and
the persistence baseline."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .embedding import calendar_indices
from .graph import load_graph

logger = logging.getLogger(__name__)

RAW_MAGIC = b"GSTF"
RAW_VERSION = 1
DEFAULT_START = 1704067200  # 2024-01-01 00:00 UTC, a Monday
MAPE_THRESHOLD = 1e-6


@dataclass
class TrafficSeries:
    """``T x N x C`` measurements on a regular clock."""

    values: np.ndarray = field(repr=False)
    start: int = DEFAULT_START
    step_minutes: int = 5
    sensor_ids: tuple = ()
    n_imputed: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"series must be T x N x C, got shape {self.values.shape}")
        if not self.sensor_ids:
            self.sensor_ids = tuple(range(self.values.shape[1]))

    @property
    def shape(self):
        return self.values.shape

    @property
    def timestamps(self):
        return self.start + 60 * self.step_minutes * np.arange(self.values.shape[0], dtype=np.int64)

    def calendar(self):
        """``(daily, weekly)`` 1-based indices per time step."""
        return calendar_indices(self.timestamps, self.step_minutes)


@dataclass
class ForecastBatch:
    """Aligned history/target windows with their anomaly labels and calendar indices."""

    x: np.ndarray
    y: np.ndarray
    exc: np.ndarray
    daily: np.ndarray
    weekly: np.ndarray
    starts: np.ndarray = None

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        starts = None if self.starts is None else self.starts[idx]
        return ForecastBatch(self.x[idx], self.y[idx], self.exc[idx], self.daily[idx], self.weekly[idx], starts)


def _impute(values):
    # forward fill along time, then backward fill what is left at the start
    missing = np.isnan(values)
    count = int(missing.sum())
    if not count:
        return values, 0
    v = values.copy()
    for t in range(1, v.shape[0]):
        gap = np.isnan(v[t])
        v[t][gap] = v[t - 1][gap]
    for t in range(v.shape[0] - 2, -1, -1):
        gap = np.isnan(v[t])
        v[t][gap] = v[t + 1][gap]
    if np.isnan(v).any():
        raise ValueError("series has a signal with no observed values")
    return v, count


def read_series_csv(path, n_channels=1, start=DEFAULT_START, step_minutes=5):
    """One row per step with ``N*C`` numeric columns (sensor-major); header optional.

    Empty cells are treated as missing and imputed by forward then backward
    fill; the count is kept on ``n_imputed``.
    """
    rows, header = [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and header is None:
                try:
                    [float(c) for c in row if c.strip()]
                except ValueError:
                    header = row
                    continue
            if rows and len(row) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(row)}")
            try:
                rows.append([float(c) if c.strip() else np.nan for c in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {row!r}") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows)
    if arr.shape[1] % n_channels:
        raise ValueError(f"{path}: {arr.shape[1]} columns is not a multiple of {n_channels} channels")
    values, n_imp = _impute(arr.reshape(arr.shape[0], -1, n_channels))
    if n_imp:
        logger.warning("%s: imputed %d missing values", path, n_imp)
    return TrafficSeries(values, start, step_minutes, n_imputed=n_imp)


def write_series_csv(path, series, header=True):
    t, n, c = series.values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"s{i}_c{j}" for i in range(n) for j in range(c)])
        for row in series.values.reshape(t, n * c):
            w.writerow([repr(float(v)) for v in row])


def read_series_raw(path):
    """Binary series: ``GSTF``, uint32 version, T/N/C uint64, float64 values,
    then int64 start (epoch seconds) and int64 step minutes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic, not a GSTF raw series")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != RAW_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    t, n, c = struct.unpack_from("<3Q", data, 8)
    size = t * n * c
    off = 32
    if len(data) != off + 8 * size + 16:
        raise ValueError(f"{path}: file size does not match header {t}x{n}x{c}")
    values = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(t, n, c).copy()
    start, step = struct.unpack_from("<2q", data, off + 8 * size)
    values, n_imp = _impute(values)
    return TrafficSeries(values, int(start), int(step), n_imputed=n_imp)


def write_series_raw(path, series):
    v = np.ascontiguousarray(series.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", RAW_VERSION))
        fh.write(struct.pack("<3Q", *v.shape))
        fh.write(v.tobytes())
        fh.write(struct.pack("<2q", int(series.start), int(series.step_minutes)))


def load_series(path, format=None, **kwargs):
    """Load a series from ``csv`` or ``raw``; format inferred from the suffix if omitted."""
    path = str(path)
    if format is None:
        format = "csv" if path.lower().endswith(".csv") else "raw"
    if format == "csv":
        return read_series_csv(path, **kwargs)
    if format == "raw":
        return read_series_raw(path)
    raise ValueError(f"unknown series format {format!r}")


class ZScoreScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardization of ``(..., C)`` arrays.

    Fit on the training part only; ``transform`` and ``inverse_transform``
    reuse those statistics.
    """

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        self.mean_ = flat.mean(axis=0)
        self.scale_ = flat.std(axis=0)
        if np.any(self.scale_ == 0):
            raise ValueError("training split has zero standard deviation in some channel")
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_


def normalize(series, train_end):
    """Z-score ``series`` with statistics of steps ``[0, train_end)``."""
    values = getattr(series, "values", series)
    scaler = ZScoreScaler().fit(values[:train_end])
    return scaler.transform(values), scaler.mean_, scaler.scale_


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split of ``T`` steps into contiguous train/val/test ranges."""

    n_steps: int
    ratios: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"bad split ratios {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")

    @property
    def boundaries(self):
        """``((0, a), (a, b), (b, T))`` with ``a = floor(0.6 T)`` and ``b = floor(0.8 T)``."""
        t = self.n_steps
        a = int(math.floor(self.ratios[0] * t + 1e-9))
        b = int(math.floor((self.ratios[0] + self.ratios[1]) * t + 1e-9))
        return {"train": (0, a), "val": (a, b), "test": (b, t)}


def window_starts(lo, hi, alpha, beta):
    """Start offsets of all stride-1 windows of length ``alpha + beta`` inside ``[lo, hi)``."""
    count = hi - lo - alpha - beta + 1
    if count < 1:
        raise ValueError(
            f"split [{lo}, {hi}) has {hi - lo} steps; needs at least alpha+beta={alpha + beta}"
        )
    return np.arange(lo, lo + count)


def gather_windows(values, starts, alpha, beta, exc=None, daily=None, weekly=None):
    starts = np.asarray(starts)
    hist = starts[:, None] + np.arange(alpha)
    fut = starts[:, None] + alpha + np.arange(beta)
    if exc is None:
        exc = np.zeros(values.shape, dtype=np.int8)
    if daily is None:
        daily = np.ones(values.shape[0], dtype=np.int64)
    if weekly is None:
        weekly = np.ones(values.shape[0], dtype=np.int64)
    return ForecastBatch(
        x=values[hist], y=values[fut], exc=exc[hist].astype(np.float64),
        daily=daily[hist], weekly=weekly[hist], starts=starts,
    )


def make_windows(values, alpha=12, beta=12, split=None, exc=None, daily=None, weekly=None):
    """Window every split; returns ``{name: ForecastBatch}``.

    Windows never cross a split boundary. Without ``split`` the whole series
    is one ``"all"`` split.
    """
    values = np.asarray(getattr(values, "values", values))
    bounds = {"all": (0, values.shape[0])} if split is None else split.boundaries
    return {
        name: gather_windows(values, window_starts(lo, hi, alpha, beta), alpha, beta, exc, daily, weekly)
        for name, (lo, hi) in bounds.items()
    }


def metrics(pred, target, threshold=MAPE_THRESHOLD):
    """MAE, RMSE and MAPE (percent) over every element.

    MAPE skips targets with ``|target| <= threshold``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    err = pred - target
    keep = np.abs(target) > threshold
    if not keep.any():
        raise ValueError("MAPE undefined: every target is zero")
    return {
        "MAE": float(np.mean(np.abs(err))),
        "RMSE": float(np.sqrt(np.mean(err ** 2))),
        "MAPE": float(np.mean(np.abs(err[keep]) / np.abs(target[keep])) * 100.0),
    }


def hi_baseline(history, beta=12):
    """Persistence forecast: repeat the last observed step ``beta`` times.

    ``history`` is ``(..., alpha, N, C)``.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim < 3 or history.shape[-3] < 1:
        raise ValueError(f"history must be (..., alpha>=1, N, C), got {history.shape}")
    last = history[..., -1:, :, :]
    reps = [1] * history.ndim
    reps[-3] = beta
    return np.tile(last, reps)


class HistoricalInertiaForecaster(RegressorMixin, BaseEstimator):
    """Scikit-learn wrapper for :func:`hi_baseline`.

    Parameters
    ----------
    horizon : int, default=12
        Number of steps to forecast.
    """

    def __init__(self, horizon=12):
        self.horizon = horizon

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.n_features_in_ = int(np.prod(X.shape[-2:]))
        return self

    def predict(self, X):
        check_is_fitted(self)
        return hi_baseline(X, self.horizon)

    def score(self, X, y, sample_weight=None):
        return -metrics(self.predict(X), y)["MAE"]


def synth_dataset(n_sensors=10, n_steps=2000, seed=0, step_minutes=5, spike_rate=0.01,
                  noise=0.002, min_gap=13, ripple=0.05, ripple_period=3.7, start=DEFAULT_START):
    """Sinusoids with a daily period, small noise and isolated spikes.

    Returns ``(series, graph, truth)`` where ``truth`` marks spike positions.
    Sensors lie on a path with a few random chords; neighbouring sensors have
    nearby phases. Spikes are single-step jumps of 0.6..1.0 amplitude, at
    least ``min_gap`` steps apart on each sensor.

    A short-period ripple (``ripple`` times the amplitude, period
    ``ripple_period`` steps) keeps every 12-step window's spread away from
    zero, so smooth turning points and noise tails do not trip a trailing
    3-sigma detector.
    """
    rng = np.random.default_rng(seed)
    period = 24 * 60 // step_minutes
    t = np.arange(n_steps)
    base = rng.uniform(150.0, 250.0, n_sensors)
    amp = rng.uniform(60.0, 100.0, n_sensors)
    phase = np.cumsum(rng.uniform(0.0, 0.4, n_sensors))
    clean = base + amp * np.sin(2 * np.pi * t[:, None] / period + phase)
    ripple_phase = rng.uniform(0.0, 2 * np.pi, n_sensors)
    clean = clean + ripple * amp * np.sin(2 * np.pi * t[:, None] / ripple_period + ripple_phase)
    values = clean + noise * amp * rng.standard_normal((n_steps, n_sensors))
    truth = np.zeros((n_steps, n_sensors), dtype=np.int8)
    for i in range(n_sensors):
        pos = min_gap
        while True:
            pos += min_gap + int(rng.geometric(spike_rate))
            if pos >= n_steps:
                break
            truth[pos, i] = 1
            sign = rng.choice([-1.0, 1.0])
            values[pos, i] += sign * rng.uniform(0.6, 1.0) * amp[i]
    edges = [(i, i + 1) for i in range(n_sensors - 1)]
    for _ in range(max(0, n_sensors // 5)):
        i, j = rng.choice(n_sensors, 2, replace=False)
        edges.append((int(i), int(j)))
    graph = load_graph(edges, n_sensors)
    series = TrafficSeries(values[:, :, None], start, step_minutes)
    return series, graph, truth[:, :, None]
