import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gstf import GSTFForecaster
from gstf.data import make_windows, synth_dataset

TINY = dict(d_model=8, d_hidden=4, n_layers=1, n_prototypes=2, n_eigvecs=2, lr=1e-3,
            batch_size=8, max_epochs=2, patience=2)


@pytest.fixture(scope="module")
def windows():
    series, graph, truth = synth_dataset(n_sensors=4, n_steps=80, seed=0)
    values = (series.values - series.values.mean()) / series.values.std()
    b = make_windows(values, exc=truth)["all"]
    return graph, b


def test_params_round_trip():
    est = GSTFForecaster(**TINY)
    params = est.get_params()
    assert params["d_model"] == 8 and params["variant"] == "full"
    other = clone(est).set_params(variant="w/ext")
    assert other.variant == "w/ext" and est.variant == "full"
    defaults = GSTFForecaster().get_params()
    assert (defaults["d_model"], defaults["d_hidden"], defaults["n_layers"], defaults["n_prototypes"]) == (64, 16, 4, 64)
    assert (defaults["lr"], defaults["batch_size"], defaults["max_epochs"], defaults["patience"]) == (0.01, 16, 400, 50)


def test_fit_predict_score(windows):
    graph, b = windows
    est = GSTFForecaster(adjacency=graph.adjacency, **TINY)
    assert est.fit(b.x, b.y, anomalies=b.exc) is est
    pred = est.predict(b.x[:3], anomalies=b.exc[:3])
    assert pred.shape == (3, 12, 4, 1)
    assert len(est.history_) == 2
    assert est.score(b.x, b.y, anomalies=b.exc) <= 0
    assert est.n_features_in_ == 4


def test_fit_is_reproducible(windows):
    _, b = windows
    a = GSTFForecaster(**TINY).fit(b.x, b.y).predict(b.x[:2])
    c = GSTFForecaster(**TINY).fit(b.x, b.y).predict(b.x[:2])
    np.testing.assert_array_equal(a, c)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        GSTFForecaster().predict(np.zeros((1, 12, 3, 1)))


def test_input_validation(windows):
    _, b = windows
    est = GSTFForecaster(**TINY)
    with pytest.raises(ValueError, match="shape"):
        est.fit(b.x[0], b.y[0])
    bad = b.x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        est.fit(bad, b.y)
    with pytest.raises(ValueError, match="adjacency"):
        GSTFForecaster(adjacency=np.zeros((3, 3)), **TINY).fit(b.x, b.y)
