"""Loss, Adam, early-stopped training and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from .anomaly import detect_anomalies
from .data import ZScoreScaler, make_windows, metrics, synth_dataset
from .model import GSTFModel, NumericError
from .tensor import Tensor, as_tensor, backward, gradcheck, mean, tensor_abs

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse", "val_mape")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_epoch):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 16
    max_epochs: int = 400
    patience: int = 50
    min_delta: float = 1e-4
    seed: int = 0
    loss: str = "mae"
    huber_delta: float = 1.0
    clip_norm: float = 5.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.loss not in ("mae", "huber"):
            raise ValueError(f"unknown loss {self.loss!r}")


def huber(x, delta=1.0):
    a = np.abs(x.data)
    quad = a <= delta
    out = np.where(quad, 0.5 * x.data ** 2, delta * (a - 0.5 * delta))
    return Tensor.from_op(out, [(x, lambda g: g * np.where(quad, x.data, delta * np.sign(x.data)))])


def loss(pred, target, kind="mae", delta=1.0):
    """Mean absolute error (default) or mean Huber loss as a scalar tensor."""
    pred = as_tensor(pred)
    diff = pred - as_tensor(target)
    if kind == "mae":
        return mean(tensor_abs(diff))
    if kind == "huber":
        return mean(huber(diff, delta))
    raise ValueError(f"unknown loss {kind!r}")


class Adam:
    """Adam with bias correction over a :class:`~gstf.tensor.ParamStore`."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def train_step(model, batch, optimizer, config):
    model.params.zero_grad()
    pred = model.forward(batch.x, batch.exc, batch.daily, batch.weekly, training=True)
    value = loss(pred, batch.y, config.loss, config.huber_delta)
    if not np.isfinite(value.item()):
        raise FloatingPointError("training loss is not finite")
    backward(value)
    clip_grad_norm(model.params, config.clip_norm)
    optimizer.step()
    return value.item()


def predict_batches(model, batch, chunk=64):
    if not isinstance(model, GSTFModel):
        return np.asarray(model.predict(batch.x))
    parts = []
    for lo in range(0, len(batch), chunk):
        sl = slice(lo, lo + chunk)
        parts.append(model.predict(batch.x[sl], batch.exc[sl], batch.daily[sl], batch.weekly[sl]))
    return np.concatenate(parts, axis=0)


def evaluate(model, batch, scaler=None):
    """De-normalized MAE/RMSE/MAPE over ``batch`` plus a per-horizon-step breakdown.

    ``model`` is a :class:`GSTFModel` or anything with ``predict(x)``.
    """
    if batch is None or len(batch) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predict_batches(model, batch)
    target = batch.y
    if scaler is not None:
        pred = scaler.inverse_transform(pred)
        target = scaler.inverse_transform(target)
    report = metrics(pred, target)
    report["per_horizon"] = [
        dict(step=h + 1, **metrics(pred[:, h], target[:, h])) for h in range(pred.shape[1])
    ]
    return report


def fit(model, train, val, config=None, scaler=None, log_every=0):
    """Train ``model`` in place with early stopping on validation MAE.

    Each epoch is one seeded shuffled pass over ``train``. Training stops
    after ``patience`` epochs without an improvement larger than
    ``min_delta``, after ``max_epochs``, or once ``max_steps`` optimizer
    steps have been taken. The best-validation parameters are restored into
    ``model`` before returning ``(best_state, history)``.
    """
    config = config or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.lr)
    history = []
    best_mae, best_state, stale = np.inf, model.state_dict(), 0
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            try:
                losses.append(train_step(model, train.subset(order[lo:lo + config.batch_size]), opt, config))
            except (FloatingPointError, NumericError) as exc:
                raise TrainingDiverged(f"diverged in epoch {epoch}: {exc}", epoch - 1) from exc
            steps += 1
            if config.max_steps and steps >= config.max_steps:
                break
        report = evaluate(model, val, scaler)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_mae": report["MAE"],
            "val_rmse": report["RMSE"],
            "val_mape": report["MAPE"],
        }
        history.append(row)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.5f val MAE %.4f (%.1fs)", epoch, row["train_loss"],
                        row["val_mae"], time.perf_counter() - tic)
        if row["val_mae"] < best_mae - config.min_delta:
            best_mae, best_state, stale = row["val_mae"], model.state_dict(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        if config.max_steps and steps >= config.max_steps:
            break
    model.load_state_dict(best_state)
    return best_state, history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def read_history(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def model_gradcheck(model, batch, samples=50, rng=None, kind="mae"):
    """Per-group gradcheck of the training loss through the whole model.

    For the MAE loss, coordinates whose finite-difference step flips the sign
    of any residual sit on a kink and are resampled.
    """
    last = {}

    def f():
        pred = model.forward(batch.x, batch.exc, batch.daily, batch.weekly, training=True)
        last["diff"] = pred.data - batch.y
        return loss(pred, batch.y, kind)

    def signs():
        d = last["diff"]
        return np.sign(d) if kind == "mae" else np.abs(d) <= 1.0

    return gradcheck(f, model.params, samples=samples, rng=rng, signature=signs)



def gradcheck_instance(seed=0, n_windows=4, n_sensors=4):
    """Small seeded check problem: 12-step windows over ``n_sensors`` sensors.

    Windows are drawn among those holding at least two anomaly labels so
    the anomaly branch carries gradient. Returns ``(graph, batch)``.
    """
    series, graph, _ = synth_dataset(n_sensors=n_sensors, n_steps=400, seed=1)
    exc = detect_anomalies(series.values)
    values = ZScoreScaler().fit(series.values[:240]).transform(series.values)
    daily, weekly = series.calendar()
    windows = make_windows(values, exc=exc, daily=daily, weekly=weekly)["all"]
    pool = np.flatnonzero(windows.exc.sum(axis=(1, 2, 3)) >= 2)
    pick = np.random.default_rng(seed).choice(pool, n_windows, replace=False)
    return graph, windows.subset(np.sort(pick))
