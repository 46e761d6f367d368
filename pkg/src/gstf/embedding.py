"""Input embedding: projected values plus positional, calendar and graph terms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, matmul, take_rows

MINUTES_PER_DAY = 1440
DAYS_PER_WEEK = 7


def positional_encoding(alpha, d):
    """Fixed sinusoidal encoding, shape ``(alpha, d)``."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even width, got {d}")
    t = np.arange(alpha, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((alpha, d))
    pe[:, 0::2] = np.sin(t / freq)
    pe[:, 1::2] = np.cos(t / freq)
    return pe


def calendar_indices(timestamps, resolution=5):
    """1-based minute-of-day and day-of-week (Monday = 1) for each timestamp.

    ``timestamps`` are POSIX seconds (UTC) or ``datetime`` objects and must
    fall on multiples of ``resolution`` minutes.
    """
    daily, weekly = [], []
    for ts in timestamps:
        if not isinstance(ts, datetime):
            ts = datetime.fromtimestamp(int(ts), tz=timezone.utc)
        if ts.second or ts.microsecond or ts.minute % resolution:
            raise ValueError(f"timestamp {ts.isoformat()} is not aligned to {resolution} minutes")
        daily.append(ts.hour * 60 + ts.minute + 1)
        weekly.append(ts.isoweekday())
    return np.asarray(daily, dtype=np.int64), np.asarray(weekly, dtype=np.int64)


@dataclass
class EmbeddingBundle:
    in_w: Tensor
    in_b: Tensor
    daily: Tensor
    weekly: Tensor
    spatial_w: Tensor

    @property
    def d_model(self):
        return self.in_w.shape[1]

    @classmethod
    def init(cls, store, n_channels, d_model, k, rng, prefix="embed"):
        b_c = 1.0 / math.sqrt(n_channels)
        b_d = 1.0 / math.sqrt(d_model)
        b_k = 1.0 / math.sqrt(k)
        return cls(
            in_w=store.add(f"{prefix}.input.w", rng.uniform(-b_c, b_c, (n_channels, d_model))),
            in_b=store.add(f"{prefix}.input.b", rng.uniform(-b_c, b_c, d_model)),
            daily=store.add(f"{prefix}.daily.table", rng.uniform(-b_d, b_d, (MINUTES_PER_DAY, d_model))),
            weekly=store.add(f"{prefix}.weekly.table", rng.uniform(-b_d, b_d, (DAYS_PER_WEEK, d_model))),
            spatial_w=store.add(f"{prefix}.spatial.w", rng.uniform(-b_k, b_k, (k, d_model))),
        )


def embed(x, bundle, spatial_vectors, daily_index, weekly_index, return_parts=False):
    """Sum of value projection, sinusoidal, daily, weekly and spatial terms.

    ``x`` is ``(B, alpha, N, C)``; ``daily_index``/``weekly_index`` are
    ``(B, alpha)`` 1-based integers; ``spatial_vectors`` is ``(N, k)``.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"expected (B, alpha, N, C) input, got {x.shape}")
    _, alpha, n, _ = x.shape
    d = bundle.d_model
    spatial_vectors = np.asarray(spatial_vectors, dtype=np.float64)
    if spatial_vectors.shape != (n, bundle.spatial_w.shape[0]):
        raise DimensionError(
            f"spatial vectors {spatial_vectors.shape} do not match ({n}, {bundle.spatial_w.shape[0]})"
        )
    daily_index = np.asarray(daily_index)
    weekly_index = np.asarray(weekly_index)
    if daily_index.min() < 1 or daily_index.max() > MINUTES_PER_DAY:
        raise ValueError("daily index out of [1, 1440]")
    if weekly_index.min() < 1 or weekly_index.max() > DAYS_PER_WEEK:
        raise ValueError("weekly index out of [1, 7]")

    origin = matmul(x, bundle.in_w) + bundle.in_b
    pe = Tensor(positional_encoding(alpha, d)[:, None, :])
    day = take_rows(bundle.daily, daily_index - 1).reshape(*daily_index.shape[:2], 1, d)
    week = take_rows(bundle.weekly, weekly_index - 1).reshape(*weekly_index.shape[:2], 1, d)
    space = matmul(Tensor(spatial_vectors), bundle.spatial_w)
    out = origin + pe + day + week + space
    if return_parts:
        return out, {"origin": origin, "pe": pe, "daily": day, "weekly": week, "spatial": space}
    return out
