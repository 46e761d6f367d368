"""Dense float64 arrays with a define-by-run reverse-mode tape.

Every op records its parents together with a closure mapping the output
gradient to the parent's gradient. :func:`backward` walks the graph in
reverse topological order, so each node is visited exactly once and
gradients of reused nodes accumulate additively.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    # sum out axes that were broadcast on the way forward
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: a value, a gradient slot and parent links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "flags")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = ()
        self.flags = {}

    @classmethod
    def from_op(cls, data, parents):
        """Build an op result from ``(parent, grad_fn)`` pairs."""
        out = cls(data)
        if _grad_enabled:
            live = tuple((p, fn) for p, fn in parents if p.requires_grad)
            if live:
                out.requires_grad = True
                out._parents = live
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def abs(self):
        return tensor_abs(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor.from_op(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def neg(a):
    return Tensor.from_op(-a.data, [(a, lambda g: -g)])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor.from_op(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def matmul(a, b):
    """Batched matrix product with numpy ``matmul`` semantics (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return Tensor.from_op(out, [(a, grad_a), (b, grad_b)])


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
    return Tensor.from_op(out, [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inverse))])


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    parents = []
    for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(lo, hi)
        parents.append((t, lambda g, idx=tuple(idx): g[idx]))
    return Tensor.from_op(out, parents)


def unfold(h):
    """Flatten ``(..., alpha, N, d)`` to ``(..., alpha*N, d)``; token ``(t, i)`` -> ``t*N + i``."""
    h = as_tensor(h)
    *lead, alpha, n, d = h.shape
    return reshape(h, (*lead, alpha * n, d))


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Tensor.from_op(out, [(a, grad_fn)])


def mean(a):
    return mul(tensor_sum(a), 1.0 / a.size)


def tensor_abs(a):
    return Tensor.from_op(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def square(a):
    return Tensor.from_op(a.data ** 2, [(a, lambda g: 2.0 * g * a.data)])


def take_rows(table, index):
    """Gather rows ``table[index]``; gradients scatter-add back into the table."""
    index = np.asarray(index, dtype=np.intp)
    out = table.data[index]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return full

    return Tensor.from_op(out, [(table, grad_fn)])


def softmax_masked(scores, mask=None, return_flag=False):
    """Softmax over the last axis with forbidden positions forced to zero.

    ``mask`` is boolean and broadcastable to ``scores``; ``True`` forbids the
    position. A row with every position forbidden comes back all-zero and
    the output carries ``flags['degenerate'] = True``.
    """
    scores = as_tensor(scores)
    s = scores.data
    degenerate = False
    if mask is None:
        shifted = s - s.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            allowed = np.broadcast_to(~mask, s.shape)
        except ValueError as exc:
            raise DimensionError(f"mask shape {mask.shape} does not broadcast to {s.shape}") from exc
        filled = np.where(allowed, s, -np.inf)
        row_max = filled.max(axis=-1, keepdims=True)
        dead = ~np.isfinite(row_max)
        degenerate = bool(dead.any())
        row_max = np.where(dead, 0.0, row_max)
        e = np.where(allowed, np.exp(np.where(allowed, s - row_max, 0.0)), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        p = e / np.where(denom > 0, denom, 1.0)

    def grad_fn(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    out = Tensor.from_op(p, [(scores, grad_fn)])
    out.flags["degenerate"] = degenerate
    return (out, degenerate) if return_flag else out


@dataclass
class BatchNormState:
    """Running statistics for :func:`batch_norm`."""

    num_features: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features, dtype=DTYPE)


def batch_norm(x, gamma, beta, state, training=True, update_stats=True):
    """Normalize a ``B x F`` batch per feature, then scale and shift.

    Train mode uses (biased) batch statistics and folds them into the
    running estimates as ``new = momentum*old + (1-momentum)*batch``.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != state.num_features:
        raise DimensionError(f"batch_norm expects (B, {state.num_features}), got {x.shape}")
    b = x.shape[0]
    if training:
        if b < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if update_stats and _grad_enabled:
            state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
            state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def grad_x(g):
        dxhat = g * gamma.data
        if not training:
            return dxhat * inv_std
        return inv_std / b * (
            b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    return Tensor.from_op(out, [
        (x, grad_x),
        (gamma, lambda g: (g * xhat).sum(axis=0)),
        (beta, lambda g: g.sum(axis=0)),
    ])


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Leaf gradients accumulate into existing ``.grad`` buffers; call
    :meth:`ParamStore.zero_grad` between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        for parent, fn in node._parents:
            pg = fn(g)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class ParamStore:
    """Ordered mapping of parameter names to leaf tensors."""

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def n_parameters(self):
        return sum(t.size for t in self._params.values())

    def state_dict(self):
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state_dict(self, state):
        missing = [k for k in self._params if k not in state]
        if missing:
            raise KeyError(f"state is missing parameters {missing}")
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if v.shape != self._params[k].shape:
                raise DimensionError(f"{k}: expected {self._params[k].shape}, got {v.shape}")
            self._params[k].data = np.array(v, dtype=DTYPE)


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def _group_of(name):
    return name.rsplit(".", 1)[0] if "." in name else name


def gradcheck(f, params, samples=50, step=1e-5, rng=None, groups=None, nonzero_share=0.8,
              signature=None):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and returns a scalar tensor built from the
    tensors in ``params``. Coordinates are sampled per group (parameter name
    up to its last dot by default); ``nonzero_share`` of each sample is drawn
    from coordinates with a nonzero analytic gradient when there are enough.

    ``signature``, if given, is called after every evaluation of ``f`` and
    should return an array identifying the linear piece of a piecewise
    smooth loss (e.g. the residual signs of an absolute error). Coordinates
    whose perturbation changes it straddle a kink; they are skipped and
    replaced by fresh draws.

    Returns a dict ``group -> max relative error``; the number of skipped
    coordinates per group is stored on the dict as ``skipped``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    groups = groups or _group_of
    params.zero_grad()
    loss = f()
    base_sig = None if signature is None else np.copy(signature())
    backward(loss)
    with no_grad():
        again = f()
    if again.item() != loss.item():
        raise RuntimeError("gradcheck: f is not deterministic (two forward passes differ)")
    analytic = {k: t.grad.copy() for k, t in params.items()}

    by_group = OrderedDict()
    for name in params:
        by_group.setdefault(groups(name), []).append(name)

    def probe(name, i):
        t = params[name]
        orig = t.data.flat[i]
        t.data.flat[i] = orig + step
        up = f().item()
        smooth = signature is None or np.array_equal(signature(), base_sig)
        t.data.flat[i] = orig - step
        down = f().item()
        smooth = smooth and (signature is None or np.array_equal(signature(), base_sig))
        t.data.flat[i] = orig
        return (up - down) / (2 * step), smooth

    report = _Report()
    with no_grad():
        for group, names in by_group.items():
            coords = [(n, i) for n in names for i in range(params[n].size)]
            live = [c for c in coords if analytic[c[0]].flat[c[1]] != 0.0]
            live_set = set(live)
            dead = [c for c in coords if c not in live_set]
            n_live = min(len(live), int(round(samples * nonzero_share)))
            pools = [
                [live[i] for i in rng.permutation(len(live))],
                [dead[i] for i in rng.permutation(len(dead))],
            ]
            quotas = [n_live, min(samples, len(coords)) - n_live]
            worst, skipped = 0.0, 0
            for pool_no in (0, 1):
                pool, quota = pools[pool_no], quotas[pool_no]
                while quota > 0 and pool:
                    name, i = pool.pop()
                    numeric, smooth = probe(name, i)
                    if not smooth:
                        skipped += 1
                        continue
                    worst = max(worst, float(relative_error(analytic[name].flat[i], numeric)))
                    quota -= 1
                if pool_no == 0:
                    # anything the live pool could not supply comes from the rest
                    quotas[1] += quota
                    pools[1].extend(pool)
            report[group] = worst
            report.skipped[group] = skipped
    return report


class _Report(OrderedDict):
    def __init__(self):
        super().__init__()
        self.skipped = {}
