import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_trace
from riskprof.data import windowize
from riskprof.predictor import (
    ForecastModel,
    LinearForecaster,
    TrainConfig,
    TrainingError,
    fit_forecaster,
    gradient_wrt_cgm,
    n_params,
    predict,
    rmse,
)

SMALL = TrainConfig(hidden=4, max_epochs=400, min_windows=0, seed=3)


def random_model(seed, history_len=6, hidden=5, out_scale=40.0):
    rng = np.random.default_rng(seed)
    d = history_len * 4
    return ForecastModel(
        mode="aggregate",
        patient_id=None,
        history_len=history_len,
        horizon=3,
        hidden=hidden,
        params=rng.normal(0, 0.5, n_params(d, hidden)),
        feature_mean=np.array([140.0, 1.0, 0.2, 5.0]),
        feature_scale=np.array([out_scale, 0.3, 1.0, 15.0]),
        train_seed=0,
    )


def random_windows(rng, n, history_len=6):
    w = np.empty((n, history_len, 4))
    w[:, :, 0] = rng.uniform(60, 300, (n, history_len))
    w[:, :, 1] = rng.uniform(0.5, 1.5, (n, history_len))
    w[:, :, 2] = rng.choice([0.0, 2.0], (n, history_len))
    w[:, :, 3] = rng.choice([0.0, 40.0], (n, history_len))
    return w


def finite_difference(model, window, eps=1e-3):
    out = np.empty(model.history_len)
    for t in range(model.history_len):
        up, down = window.copy(), window.copy()
        up[t, 0] += eps
        down[t, 0] -= eps
        out[t] = (model.raw_batch(up[None])[0] - model.raw_batch(down[None])[0]) / (2 * eps)
    return out


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(42)
    windows = random_windows(rng, 20)
    for i, w in enumerate(windows):
        model = random_model(i)
        g = gradient_wrt_cgm(model, w)
        fd = finite_difference(model, w)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_gradient_of_fitted_model_matches_differences(fitted):
    model, traces = fitted
    w = windowize(traces[0], model.history_len, model.horizon).features[:20]
    for x in w:
        fd = finite_difference(model, x)
        assert np.linalg.norm(gradient_wrt_cgm(model, x) - fd) / np.linalg.norm(fd) < 1e-4


def test_zero_weight_model_has_zero_gradient():
    m = random_model(0)
    zero = ForecastModel.from_dict({**m.to_dict(), "params": [0.0] * m.params.size})
    assert np.all(gradient_wrt_cgm(zero, random_windows(np.random.default_rng(0), 1)[0]) == 0)


def test_linear_model_gradient_is_weight():
    w = np.zeros((4, 4))
    w[-1, 0] = 0.75
    lin = LinearForecaster(w, 10.0)
    g = gradient_wrt_cgm(lin, np.full((4, 4), 100.0))
    assert g.tolist() == [0.0, 0.0, 0.0, 0.75]


def test_prediction_clamped():
    w = np.zeros((2, 4))
    w[:, 0] = 1.0
    lin = LinearForecaster(w, 0.0)
    assert predict(lin, np.array([[300.0, 0, 0, 0], [223.0, 0, 0, 0]])) == 499.0
    assert predict(LinearForecaster(w, -1000.0), np.zeros((2, 4))) == 0.0


@given(arrays(np.float64, (3, 6, 4), elements=st.floats(-1e4, 1e4)), st.integers(0, 50))
def test_predictions_always_in_range(windows, seed):
    p = random_model(seed, out_scale=5e3).predict_batch(windows)
    assert np.all((p >= 0) & (p <= 499))


def test_shape_errors():
    m = random_model(0)
    with pytest.raises(ValueError, match="shape"):
        predict(m, np.zeros((5, 4)))
    with pytest.raises(ValueError):
        m.predict_batch(np.full((1, 6, 4), np.nan))


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    t = np.arange(600)
    cgm = 150 + 60 * np.sin(2 * np.pi * t / 96) + rng.normal(0, 3, t.size)
    traces = [make_trace(cgm)]
    return fit_forecaster(traces, "personalized", 6, 3, SMALL), traces


def test_constant_trace_forecast():
    tr = make_trace(np.full(300, 120.0))
    model = fit_forecaster([tr], "personalized", 6, 3, SMALL)
    held = windowize(make_trace(np.full(60, 120.0)), 6, 3)
    assert np.all(np.abs(model.predict_batch(held.features) - 120.0) <= 1.0)


def test_ramp_heldout_error_below_noise_scale():
    rng = np.random.default_rng(1)
    t = np.arange(1200)
    tri = 100 + 2.0 * np.abs((t % 100) - 50)  # ramps up and down between 100 and 200
    tr = make_trace(tri + rng.normal(0, 2.0, t.size))
    train_tr = make_trace(tr.cgm[:900])
    model = fit_forecaster([train_tr], "personalized", 6, 3, TrainConfig(hidden=8, min_windows=0, seed=0))
    test = windowize(make_trace(tr.cgm[900:], timestamps=tr.timestamps[900:]), 6, 3)
    assert rmse(model, test) < 12.0


def test_training_is_bitwise_deterministic(fitted):
    model, traces = fitted
    again = fit_forecaster(traces, "personalized", 6, 3, SMALL)
    assert again.params.tobytes() == model.params.tobytes()
    other = fit_forecaster(traces, "personalized", 6, 3, TrainConfig(hidden=4, max_epochs=400, min_windows=0, seed=4))
    assert other.params.tobytes() != model.params.tobytes()


def test_aggregate_of_duplicates_equals_personalized(fitted):
    model, traces = fitted
    twin = make_trace(traces[0].cgm, pid="p1")
    assert twin.basal.tobytes() == traces[0].basal.tobytes()
    agg = fit_forecaster([traces[0], twin], "aggregate", 6, 3, SMALL)
    w = windowize(traces[0], 6, 3).features
    np.testing.assert_allclose(agg.predict_batch(w), model.predict_batch(w), rtol=0, atol=1e-9)


def test_fit_errors():
    tr = make_trace(np.full(40, 120.0))
    with pytest.raises(TrainingError, match="insufficient"):
        fit_forecaster([tr], "personalized", 6, 3, TrainConfig(hidden=4))
    with pytest.raises(TrainingError):
        fit_forecaster([], "aggregate")
    with pytest.raises(TrainingError):
        fit_forecaster([tr, make_trace(np.full(40, 1.0), pid="x")], "personalized", 6, 3, SMALL)


def test_json_roundtrip(fitted, tmp_path):
    model, traces = fitted
    model.save(tmp_path / "m.json")
    back = ForecastModel.load(tmp_path / "m.json")
    w = windowize(traces[0], 6, 3).features
    assert back.predict_batch(w).tobytes() == model.predict_batch(w).tobytes()
    assert back.train_rmse == model.train_rmse
