import numpy as np
import pytest

import gstf.training as training
from gstf.data import HistoricalInertiaForecaster, ZScoreScaler, make_windows, synth_dataset
from gstf.model import GSTFConfig, GSTFModel
from gstf.tensor import ParamStore, Tensor, backward, square, tensor_sum
from gstf.training import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    clip_grad_norm,
    evaluate,
    fit,
    gradcheck_instance,
    loss,
    model_gradcheck,
    read_history,
    write_history,
)


def tiny_problem(variant="full", seed=0):
    series, graph, _ = synth_dataset(n_sensors=4, n_steps=120, seed=seed)
    scaler = ZScoreScaler().fit(series.values[:72])
    values = scaler.transform(series.values)
    daily, weekly = series.calendar()
    b = make_windows(values, daily=daily, weekly=weekly)["all"]
    cfg = GSTFConfig(n_sensors=4, d_model=8, d_hidden=4, n_layers=1, n_prototypes=2, n_eigvecs=2,
                     variant=variant)
    return GSTFModel.from_graph(cfg, graph), b.subset(np.arange(0, 40)), b.subset(np.arange(60, 70)), scaler


# -- loss ------------------------------------------------------------------------

def test_loss_examples():
    assert loss(np.ones(3), np.ones(3)).item() == 0.0
    assert loss(np.array([2.0]), np.array([0.0])).item() == 2.0
    assert loss(np.array([0.5, 3.0]), np.zeros(2), "huber").item() == pytest.approx((0.125 + 2.5) / 2)
    with pytest.raises(ValueError):
        loss(np.ones(1), np.ones(1), "l3")


def test_mae_subgradient_is_zero_at_ties():
    pred = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(loss(pred, np.array([1.0, 0.0])))
    np.testing.assert_array_equal(pred.grad, [0.0, 0.5])


# -- optimizer -------------------------------------------------------------------

def _scalar_store(value):
    store = ParamStore()
    return store, store.add("w", np.array([value]))


def test_adam_zero_gradient_keeps_params():
    store, w = _scalar_store(1.5)
    w.grad = np.zeros(1)
    Adam(store).step()
    assert w.data[0] == 1.5


def test_adam_zero_lr_keeps_params():
    store, w = _scalar_store(1.5)
    w.grad = np.array([4.0])
    Adam(store, lr=0.0).step()
    assert w.data[0] == 1.5


@pytest.mark.parametrize("g", [1e-3, 0.7, 250.0])
def test_adam_first_step_has_size_lr(g):
    store, w = _scalar_store(0.0)
    w.grad = np.array([g])
    Adam(store, lr=0.01).step()
    assert w.data[0] == pytest.approx(-0.01 * g / (g + 1e-8), rel=1e-12)


def test_adam_minimizes_quadratic():
    store, w = _scalar_store(0.0)
    opt = Adam(store, lr=0.1)
    for _ in range(100):
        store.zero_grad()
        backward(tensor_sum(square(w - 3.0)))
        opt.step()
    assert abs(w.data[0] - 3.0) < 0.1


def test_adam_names_non_finite_parameter():
    store, w = _scalar_store(0.0)
    w.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'w'"):
        Adam(store).step()


def test_clip_grad_norm():
    store = ParamStore()
    a, b = store.add("a", np.zeros(2)), store.add("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm(store, 1.0) == pytest.approx(5.0)
    assert np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0)
    a.grad = np.array([0.3, 0.0])
    clip_grad_norm(store, 10.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=20)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.max_epochs, cfg.patience) == (0.01, 16, 400, 50)


# -- fit -------------------------------------------------------------------------

def test_patience_one_stops_after_two_epochs(monkeypatch):
    model, train, val, _ = tiny_problem()
    scores = iter(range(1, 100))
    monkeypatch.setattr(training, "evaluate",
                        lambda *a, **k: {"MAE": float(next(scores)), "RMSE": 0.0, "MAPE": 0.0})
    _, history = fit(model, train, val, TrainConfig(max_epochs=20, patience=1))
    assert len(history) == 2


def test_fit_is_deterministic_and_keeps_best():
    cfg = TrainConfig(lr=1e-3, max_epochs=3, patience=3, batch_size=8)
    m1, train, val, scaler = tiny_problem()
    _, h1 = fit(m1, train, val, cfg, scaler)
    m2, *_ = tiny_problem()
    _, h2 = fit(m2, train, val, cfg, scaler)
    assert h1 == h2
    assert len(h1) == 3
    best = min(row["val_mae"] for row in h1)
    assert best <= h1[-1]["val_mae"]
    assert evaluate(m1, val, scaler)["MAE"] == pytest.approx(best, abs=1e-12)


def test_max_steps_caps_training():
    model, train, val, _ = tiny_problem()
    _, history = fit(model, train, val, TrainConfig(lr=1e-3, max_epochs=10, patience=10, max_steps=3, batch_size=8))
    assert len(history) == 1


def test_divergence_reports_last_good_epoch(monkeypatch):
    model, train, val, _ = tiny_problem()
    calls = {"n": 0}
    real = training.train_step

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] > len(train) // 8:
            raise FloatingPointError("training loss is not finite")
        return real(*args)

    monkeypatch.setattr(training, "train_step", flaky)
    with pytest.raises(TrainingDiverged) as info:
        fit(model, train, val, TrainConfig(lr=1e-3, max_epochs=5, patience=5, batch_size=8))
    assert info.value.last_good_epoch == 1


def test_fit_rejects_empty_split():
    model, train, val, _ = tiny_problem()
    with pytest.raises(ValueError):
        fit(model, train, val.subset(np.arange(0)))


def test_history_round_trip(tmp_path):
    rows = [{"epoch": 1, "train_loss": 0.5, "val_mae": 3.25, "val_rmse": 4.0, "val_mape": 12.5}]
    write_history(tmp_path / "h.csv", rows)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_mae,val_rmse,val_mape"
    assert read_history(tmp_path / "h.csv") == rows


# -- evaluate --------------------------------------------------------------------

def test_evaluate_hi_on_constant_data():
    b = make_windows(np.full((40, 3, 1), 4.0))["all"]
    report = evaluate(HistoricalInertiaForecaster().fit(b.x), b)
    assert {k: report[k] for k in ("MAE", "RMSE", "MAPE")} == {"MAE": 0.0, "RMSE": 0.0, "MAPE": 0.0}
    assert len(report["per_horizon"]) == 12


def test_evaluate_is_repeatable_and_denormalized():
    model, _, val, scaler = tiny_problem()
    a, b = evaluate(model, val, scaler), evaluate(model, val, scaler)
    assert a == b
    raw = evaluate(model, val)
    assert a["MAE"] == pytest.approx(raw["MAE"] * scaler.scale_[0], rel=1e-12)
    with pytest.raises(ValueError):
        evaluate(model, val.subset(np.arange(0)))


# -- gradient check ----------------------------------------------------------------

def test_gradcheck_instance_has_anomalies():
    graph, batch = gradcheck_instance()
    assert batch.x.shape == (4, 12, 4, 1)
    assert (batch.exc.sum(axis=(1, 2, 3)) >= 2).all()
    assert graph.n_sensors == 4


@pytest.mark.parametrize("kind", ["mae", "huber"])
def test_small_model_gradcheck(kind):
    graph, batch = gradcheck_instance()
    cfg = GSTFConfig(n_sensors=4, d_model=8, d_hidden=4, n_layers=1, n_prototypes=3, n_eigvecs=2)
    report = model_gradcheck(GSTFModel.from_graph(cfg, graph), batch, samples=15,
                             rng=np.random.default_rng(0), kind=kind)
    assert {"embed", "afim", "layer0", "head"} <= {name.split(".")[0] for name in report}
    assert max(report.values()) < 1e-4
