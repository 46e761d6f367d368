"""The fused spatio-temporal forecasting network and its checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .anomaly import AfimParams, afim_forward
from .attention import AttentionParams, mtsff, ssa, tsa
from .embedding import EmbeddingBundle, embed
from .graph import build_mask, connected_components, laplacian_embedding
from .tensor import ParamStore, as_tensor, matmul, no_grad, reshape, swapaxes, transpose

logger = logging.getLogger(__name__)

VARIANTS = ("full", "w/ST", "w/ext")
_VARIANT_ALIASES = {"full": "full", "w/st": "w/ST", "wo_st": "w/ST", "w/ext": "w/ext", "wo_ext": "w/ext"}

CHECKPOINT_MAGIC = b"GSTFCKPT"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Raised when a forward pass produces non-finite values."""


def ablation_config(variant):
    """Canonical variant name: ``full``, ``w/ST`` (no MTSFF) or ``w/ext`` (no AFIM)."""
    key = str(variant).strip().lower()
    if key not in _VARIANT_ALIASES:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    return _VARIANT_ALIASES[key]


@dataclass(frozen=True)
class GSTFConfig:
    n_sensors: int
    n_channels: int = 1
    alpha: int = 12
    beta: int = 12
    d_model: int = 64
    d_hidden: int = 16
    n_layers: int = 4
    n_prototypes: int = 64
    n_eigvecs: int = 8
    hop_threshold: int = 2
    variant: str = "full"
    eq18_literal: bool = False
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", ablation_config(self.variant))
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.d_hidden > self.d_model:
            raise ValueError("d_hidden must not exceed d_model")
        if self.d_model % 2:
            raise ValueError("d_model must be even (sinusoidal encoding)")


@dataclass
class LayerParams:
    ssa: AttentionParams
    tsa: AttentionParams
    mtsff: AttentionParams | None


def mtsffl_layer(h, mask, layer, eq18_literal=False, residual=False):
    """One fusion layer on ``h`` of shape ``(B, alpha, N, d)``; returns ``(B, alpha*N, d)``.

    Spatial attention, then temporal attention on the result, then the
    space-time attention. ``layer.mtsff is None`` makes the last stage an
    identity on the unfolded temporal output. With ``residual`` each stage
    adds its input back onto its output.
    """
    h_s = ssa(h, mask, layer.ssa)
    if residual:
        h_s = h_s + h
    h_t = swapaxes(tsa(swapaxes(h_s, -3, -2), layer.tsa), -3, -2)
    if residual:
        h_t = h_t + h_s
    fused_in = h_s if eq18_literal else h_t
    b, alpha, n, d = fused_in.shape
    flat = reshape(fused_in, (b, alpha * n, d))
    if layer.mtsff is None:
        return flat
    out = mtsff(fused_in, mask, layer.mtsff)
    return out + flat if residual else out


class GSTFModel:
    """Parameters, graph buffers and the forward pass.

    ``mask`` is the ``N x N`` hop mask and ``spatial_vectors`` the ``N x k``
    Laplacian eigenvectors; both are fixed inputs, not trained.
    """

    def __init__(self, config, mask, spatial_vectors):
        self.config = config
        self.mask = np.asarray(mask, dtype=bool)
        self.spatial_vectors = np.asarray(spatial_vectors, dtype=np.float64)
        n = config.n_sensors
        if self.mask.shape != (n, n):
            raise ValueError(f"mask shape {self.mask.shape} does not match {n} sensors")
        if self.spatial_vectors.ndim != 2 or self.spatial_vectors.shape[0] != n:
            raise ValueError(f"spatial vectors shape {self.spatial_vectors.shape} does not match {n} sensors")
        self.params = ParamStore()
        self._build()

    @classmethod
    def from_graph(cls, config, graph):
        mask = build_mask(graph, config.hop_threshold).mask
        n_comp, _ = connected_components(graph)
        k = min(config.n_eigvecs, graph.n_sensors - n_comp)
        if k < config.n_eigvecs:
            logger.warning(
                "graph has only %d non-trivial eigenvectors; using k=%d instead of %d",
                graph.n_sensors - n_comp, k, config.n_eigvecs,
            )
            config = replace(config, n_eigvecs=k)
        if k < 1:
            raise ValueError("graph has no non-trivial Laplacian eigenvectors")
        return cls(config, mask, laplacian_embedding(graph, k).vectors)

    def _build(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        k = self.spatial_vectors.shape[1]
        self.embedding = EmbeddingBundle.init(self.params, cfg.n_channels, cfg.d_model, k, rng)
        self.afim = None
        if cfg.variant != "w/ext":
            self.afim = AfimParams.init(
                self.params, cfg.n_channels, cfg.d_model, cfg.d_hidden, cfg.n_prototypes, rng
            )
        self.layers = []
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            s = AttentionParams.init(self.params, f"{pre}.ssa", cfg.d_model, cfg.d_hidden, rng)
            t = AttentionParams.init(self.params, f"{pre}.tsa", cfg.d_model, cfg.d_hidden, rng)
            m = None
            if cfg.variant != "w/ST":
                m = AttentionParams.init(self.params, f"{pre}.mtsff", cfg.d_model, cfg.d_hidden, rng)
            self.layers.append(LayerParams(s, t, m))
        b_a = 1.0 / math.sqrt(cfg.alpha)
        b_d = 1.0 / math.sqrt(cfg.d_model)
        self.conv1_w = self.params.add("head.conv1.w", rng.uniform(-b_a, b_a, (cfg.alpha, cfg.beta)))
        self.conv1_b = self.params.add("head.conv1.b", rng.uniform(-b_a, b_a, cfg.beta))
        self.conv2_w = self.params.add("head.conv2.w", rng.uniform(-b_d, b_d, (cfg.d_model, cfg.n_channels)))
        self.conv2_b = self.params.add("head.conv2.b", rng.uniform(-b_d, b_d, cfg.n_channels))

    # -- forward -------------------------------------------------------
    def hidden_state(self, x, exc, daily_index, weekly_index, training=False):
        """Return ``(h1, per_layer_outputs)``; each output is ``(B, alpha, N, d)``."""
        cfg = self.config
        x = as_tensor(x)
        if x.ndim == 3:
            x = reshape(x, (1, *x.shape))
            exc = None if exc is None else np.asarray(exc)[None]
            daily_index = np.asarray(daily_index).reshape(1, -1)
            weekly_index = np.asarray(weekly_index).reshape(1, -1)
        b, alpha, n, c = x.shape
        if (alpha, n, c) != (cfg.alpha, cfg.n_sensors, cfg.n_channels):
            raise ValueError(
                f"input window {(alpha, n, c)} does not match config "
                f"{(cfg.alpha, cfg.n_sensors, cfg.n_channels)}"
            )
        h = embed(x, self.embedding, self.spatial_vectors, daily_index, weekly_index)
        if self.afim is not None:
            exc = np.zeros(x.shape) if exc is None else np.asarray(exc, dtype=np.float64)
            h = h + afim_forward(x, exc, self.mask, self.afim, training, residual=cfg.residual)
        _check_finite(h, "input embedding")
        h1 = h
        outputs = []
        for i, layer in enumerate(self.layers):
            out = mtsffl_layer(h, self.mask, layer, cfg.eq18_literal, cfg.residual)
            _check_finite(out, f"layer {i}")
            h = reshape(out, (b, alpha, n, cfg.d_model))
            outputs.append(h)
        return h1, outputs

    def head(self, xbar):
        """Two 1x1 convolutions: time ``alpha -> beta``, then features ``d -> C``."""
        y = matmul(transpose(xbar, (0, 2, 3, 1)), self.conv1_w) + self.conv1_b
        y = transpose(y, (0, 3, 1, 2))
        return matmul(y, self.conv2_w) + self.conv2_b

    def forward(self, x, exc=None, daily_index=None, weekly_index=None, training=False):
        """Predict ``(B, beta, N, C)`` from windows ``(B, alpha, N, C)``.

        Calendar indices default to 1 (Monday, 00:00) when omitted.
        """
        x = as_tensor(x)
        lead = x.shape[:-3] + (self.config.alpha,)
        if daily_index is None:
            daily_index = np.ones(lead, dtype=np.int64)
        if weekly_index is None:
            weekly_index = np.ones(lead, dtype=np.int64)
        _, outputs = self.hidden_state(x, exc, daily_index, weekly_index, training)
        xbar = outputs[0]
        for h in outputs[1:]:
            xbar = xbar + h
        y = self.head(xbar)
        _check_finite(y, "output head")
        if x.ndim == 3:
            y = reshape(y, y.shape[1:])
        return y

    __call__ = forward

    def predict(self, x, exc=None, daily_index=None, weekly_index=None):
        with no_grad():
            return self.forward(x, exc, daily_index, weekly_index, training=False).data.copy()

    # -- state ---------------------------------------------------------
    def bn_states(self):
        return {} if self.afim is None else {"afim.bn": self.afim.bn_state}

    def state_dict(self):
        state = self.params.state_dict()
        for name, st in self.bn_states().items():
            state[f"buffer.{name}.running_mean"] = st.running_mean.copy()
            state[f"buffer.{name}.running_var"] = st.running_var.copy()
        state["buffer.graph.mask"] = self.mask.astype(np.float64)
        state["buffer.graph.spatial"] = self.spatial_vectors.copy()
        return state

    def load_state_dict(self, state):
        params = {k: v for k, v in state.items() if not k.startswith("buffer.")}
        self.params.load_state_dict(params)
        for name, st in self.bn_states().items():
            st.running_mean = np.array(state[f"buffer.{name}.running_mean"])
            st.running_var = np.array(state[f"buffer.{name}.running_var"])

    def copy(self):
        other = GSTFModel(self.config, self.mask, self.spatial_vectors)
        other.load_state_dict(self.state_dict())
        return other


def _check_finite(t, where):
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values produced by {where}")


def save_checkpoint(path, model, extra=None):
    """Binary checkpoint.

    Layout (little-endian): magic ``GSTFCKPT``, uint32 version, uint64 length
    + UTF-8 JSON (config echo and seed), uint64 block count, then per block:
    uint64 name length, name, uint64 rank, rank x uint64 extents, float64
    values in row-major order.
    """
    meta = {"config": asdict(model.config), "seed": model.config.seed}
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(state)))
        for name, arr in state.items():
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Return ``(meta, blocks)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GSTF checkpoint")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    meta = json.loads(data[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        blocks[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return meta, blocks


def load_checkpoint(path):
    meta, blocks = read_checkpoint(path)
    names = {f.name for f in fields(GSTFConfig)}
    config = GSTFConfig(**{k: v for k, v in meta["config"].items() if k in names})
    model = GSTFModel(config, blocks["buffer.graph.mask"] > 0.5, blocks["buffer.graph.spatial"])
    model.load_state_dict(blocks)
    return model, meta
