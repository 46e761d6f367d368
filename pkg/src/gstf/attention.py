"""Scaled dot-product self-attention over time (TSA), space (SSA) and the
flattened space-time token set (MTSFF)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, matmul, softmax_masked, swapaxes, unfold


@dataclass
class AttentionParams:
    """Projection weights of one attention block.

    ``w_q``/``w_k`` map ``d -> d_hidden``, ``w_v`` maps ``d -> d`` and the
    output layer ``w_o``, ``b_o`` is a ``d -> d`` fully connected map.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_hidden(self):
        return self.w_q.shape[1]

    @classmethod
    def init(cls, store, prefix, d_model, d_hidden, rng):
        if d_hidden > d_model:
            raise ValueError(f"d_hidden ({d_hidden}) must not exceed d_model ({d_model})")
        bound = 1.0 / math.sqrt(d_model)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            w_q=store.add(f"{prefix}.w_q", u(d_model, d_hidden)),
            w_k=store.add(f"{prefix}.w_k", u(d_model, d_hidden)),
            w_v=store.add(f"{prefix}.w_v", u(d_model, d_model)),
            w_o=store.add(f"{prefix}.w_o", u(d_model, d_model)),
            b_o=store.add(f"{prefix}.b_o", u(d_model)),
        )

    @classmethod
    def from_store(cls, store, prefix):
        return cls(*(store[f"{prefix}.{k}"] for k in ("w_q", "w_k", "w_v", "w_o", "b_o")))


def attend(x, p, mask=None, return_weights=False):
    """Self-attention over the second-to-last axis of ``x`` (``..., T, d``)."""
    if x.shape[-1] != p.d_model:
        raise DimensionError(f"input width {x.shape[-1]} does not match params d={p.d_model}")
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(p.d_hidden))
    weights = softmax_masked(scores, mask)
    out = matmul(matmul(weights, v), p.w_o) + p.b_o
    return (out, weights) if return_weights else out


def tsa(x, p, return_weights=False):
    """Temporal attention: ``x`` is ``(..., N, alpha, d)``, each sensor attends over its own steps."""
    return attend(x, p, None, return_weights)


def ssa(x, mask, p, return_weights=False):
    """Spatial attention: ``x`` is ``(..., alpha, N, d)``, sensors attend within each step."""
    m = _mask_array(mask)
    n = x.shape[-2]
    if m.shape != (n, n):
        raise DimensionError(f"mask shape {m.shape} does not match {n} sensors")
    return attend(x, p, m, return_weights)


def spacetime_mask(mask, alpha):
    """Replicate the ``N x N`` hop mask over every ``(t1, t2)`` block of the unfolded tokens."""
    return np.tile(_mask_array(mask), (alpha, alpha))


def mtsff(h, mask, p, return_weights=False):
    """Masked attention across all ``alpha*N`` space-time tokens.

    ``h`` is ``(..., alpha, N, d)``; the result is ``(..., alpha*N, d)`` in
    time-major token order.
    """
    alpha, n = h.shape[-3], h.shape[-2]
    m = _mask_array(mask)
    if m.shape != (n, n):
        raise DimensionError(f"mask shape {m.shape} does not match {n} sensors")
    return attend(unfold(h), p, spacetime_mask(m, alpha), return_weights)


def _mask_array(mask):
    return np.asarray(getattr(mask, "mask", mask), dtype=bool)
