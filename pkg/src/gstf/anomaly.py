"""Anomalous factor impact module.

Anomalies are labelled offline with a trailing moving-average rule, embedded
together with the raw window, propagated through temporal then masked
spatial attention, and soft-assigned to a bank of learnable prototypes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from .attention import AttentionParams, ssa, tsa
from .tensor import (
    BatchNormState,
    DimensionError,
    Tensor,
    as_tensor,
    batch_norm,
    concat,
    matmul,
    reshape,
    softmax_masked,
    swapaxes,
)

SD_FLOOR = 1e-6


def detect_anomalies(series, window=12, k_sigma=3.0, sd_floor=SD_FLOOR):
    """Flag points that leave the band ``mean +- k_sigma * sd`` of the
    preceding ``window`` points.

    Works along axis 0 of ``series`` (time); all other axes are independent
    signals. The first ``window`` points are never flagged. Returns an
    ``int8`` array of the same shape.
    """
    x = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if window < 2:
        raise ValueError(f"window must be at least 2, got {window}")
    if x.shape[0] < window:
        raise ValueError(f"series length {x.shape[0]} is shorter than window {window}")
    labels = np.zeros(x.shape, dtype=np.int8)
    if x.shape[0] == window:
        return labels
    # trailing windows ending at t-1 for t = window .. T-1
    views = sliding_window_view(x[:-1], window, axis=0)
    ma = views.mean(axis=-1)
    sd = np.maximum(views.std(axis=-1), sd_floor)
    dev = np.abs(x[window:] - ma)
    labels[window:] = (dev > k_sigma * sd).astype(np.int8)
    return labels


class MovingAverageAnomalyDetector(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`detect_anomalies`.

    Parameters
    ----------
    window : int, default=12
        Length of the trailing window.
    k_sigma : float, default=3.0
        Band half-width in trailing standard deviations.
    sd_floor : float, default=1e-6
        Lower bound on the trailing standard deviation.
    """

    def __init__(self, window=12, k_sigma=3.0, sd_floor=SD_FLOOR):
        self.window = window
        self.k_sigma = k_sigma
        self.sd_floor = sd_floor

    def fit(self, X, y=None):
        X = np.asarray(X)
        self.n_features_in_ = int(np.prod(X.shape[1:])) if X.ndim > 1 else 1
        return self

    def transform(self, X):
        return detect_anomalies(X, self.window, self.k_sigma, self.sd_floor)


def write_labels(path, labels):
    """Cached labels: ``T, N, C`` as little-endian uint64, then one byte per entry."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"labels must be T x N x C, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3Q", *labels.shape))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_labels(path):
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) != 24:
            raise ValueError(f"{path}: truncated labels header")
        shape = struct.unpack("<3Q", header)
        body = fh.read()
    expected = int(np.prod(shape))
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).astype(np.int8)


@dataclass
class AfimParams:
    fc_w: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_state: BatchNormState
    tsa: AttentionParams
    ssa: AttentionParams
    prototypes: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, store, n_channels, d_model, d_hidden, n_prototypes, rng, prefix="afim"):
        if n_prototypes < 1:
            raise ValueError("need at least one prototype")
        b_in = 1.0 / math.sqrt(2 * n_channels)
        b_d = 1.0 / math.sqrt(d_model)
        # no bias: batch norm removes any constant shift exactly
        fc_w = store.add(f"{prefix}.embed.w", rng.uniform(-b_in, b_in, (2 * n_channels, d_model)))
        gamma = store.add(f"{prefix}.bn.gamma", np.ones(d_model))
        beta = store.add(f"{prefix}.bn.beta", np.zeros(d_model))
        t = AttentionParams.init(store, f"{prefix}.tsa", d_model, d_hidden, rng)
        s = AttentionParams.init(store, f"{prefix}.ssa", d_model, d_hidden, rng)
        protos = store.add(f"{prefix}.prototypes.omega", rng.uniform(-b_d, b_d, (n_prototypes, d_model)))
        out_w = store.add(f"{prefix}.out.w", rng.uniform(-b_d, b_d, (d_model, d_model)))
        out_b = store.add(f"{prefix}.out.b", rng.uniform(-b_d, b_d, d_model))
        return cls(fc_w, gamma, beta, BatchNormState(d_model), t, s, protos, out_w, out_b)


def embed_anomalies(x, exc, fc_w, gamma, beta, bn_state, training=True):
    """``BN(FC(cat[x, exc]))`` with the batch norm taken over every token.

    The linear map carries no bias of its own; ``beta`` plays that role.
    """
    x, exc = as_tensor(x), as_tensor(exc)
    if x.shape != exc.shape:
        raise DimensionError(f"input {x.shape} and labels {exc.shape} differ in shape")
    h = matmul(concat([x, exc], axis=-1), fc_w)
    lead, d = h.shape[:-1], h.shape[-1]
    flat = reshape(h, (-1, d))
    return reshape(batch_norm(flat, gamma, beta, bn_state, training), (*lead, d))


def prototype_assign(tokens, prototypes):
    """Soft-assign each token to the prototype rows.

    Returns ``(gamma, mixed)`` where ``gamma`` is the softmax over
    prototypes of the dot-product similarity and ``mixed = gamma @ omega``.
    """
    tokens = as_tensor(tokens)
    logits = matmul(tokens, swapaxes(prototypes, 0, 1))
    gamma = softmax_masked(logits)
    return gamma, matmul(gamma, prototypes)


def afim_forward(x, exc, mask, params, training=True, residual=False, return_parts=False):
    """Anomaly impact ``Exc_inf`` for windows ``x`` of shape ``(..., alpha, N, C)``.

    ``residual`` adds each attention stage's input back onto its output.
    """
    emb = embed_anomalies(
        x, exc, params.fc_w, params.bn_gamma, params.bn_beta,
        params.bn_state, training,
    )
    temporal = swapaxes(tsa(swapaxes(emb, -3, -2), params.tsa), -3, -2)
    if residual:
        temporal = temporal + emb
    spatial = ssa(temporal, mask, params.ssa)
    if residual:
        spatial = spatial + temporal
    gamma, mixed = prototype_assign(spatial, params.prototypes)
    out = matmul(mixed, params.out_w) + params.out_b
    if return_parts:
        return out, {"embedding": emb, "temporal": temporal, "spatial": spatial, "gamma": gamma}
    return out
