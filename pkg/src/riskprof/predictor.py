"""Glucose forecasters that the attack targets.

The reference model is a one-hidden-layer tanh regressor over the flattened,
feature-normalised window. Anything with ``history_len``, ``n_features``,
``predict_batch`` and ``gradient_batch`` can stand in for it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .data import CGM_MAX, FEATURES, PatientTrace, Windows, windowize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@runtime_checkable
class Forecaster(Protocol):
    history_len: int
    n_features: int

    def predict_batch(self, windows: np.ndarray) -> np.ndarray: ...

    def gradient_batch(self, windows: np.ndarray) -> np.ndarray: ...


def _check_windows(model: Forecaster, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3 or windows.shape[1:] != (model.history_len, model.n_features):
        raise ValueError(
            f"expected windows of shape (n, {model.history_len}, {model.n_features}), got {windows.shape}"
        )
    if not np.all(np.isfinite(windows)):
        raise ValueError("window contains non-finite values")
    return windows


def predict(model: Forecaster, window: np.ndarray) -> float:
    """Forecast for a single window, clamped to [0, 499] mg/dL."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ValueError(f"expected a 2-D window, got shape {window.shape}")
    return float(model.predict_batch(window[None])[0])


def gradient_wrt_cgm(model: Forecaster, window: np.ndarray) -> np.ndarray:
    """d(forecast)/d(cgm_t) for every timestep of ``window`` (pre-clamp output)."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ValueError(f"expected a 2-D window, got shape {window.shape}")
    return model.gradient_batch(window[None])[0]


@dataclass(frozen=True, eq=False)
class LinearForecaster:
    """``bias + sum(weights * window)``; handy as an exactly-known attack target."""

    weights: np.ndarray
    bias: float = 0.0

    @property
    def history_len(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def raw_batch(self, windows: np.ndarray) -> np.ndarray:
        windows = _check_windows(self, windows)
        return np.einsum("nhf,hf->n", windows, self.weights) + self.bias

    def predict_batch(self, windows: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_batch(windows), 0.0, CGM_MAX)

    def gradient_batch(self, windows: np.ndarray) -> np.ndarray:
        windows = _check_windows(self, windows)
        return np.broadcast_to(self.weights[:, 0], (windows.shape[0], self.history_len)).copy()


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    learning_rate: float = 0.05
    max_epochs: int = 2000
    patience: int = 50
    plateau_tol: float = 1e-6
    window_stride: int = 1
    min_windows: int | None = None  # defaults to the parameter count
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ForecastModel:
    mode: str
    patient_id: str | None
    history_len: int
    horizon: int
    hidden: int
    params: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    train_seed: int
    train_rmse: float = math.nan
    epochs: int = 0
    n_features: int = len(FEATURES)
    _unpacked: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        params = np.asarray(self.params, dtype=float)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "_unpacked", unpack_params(params, self.history_len * self.n_features, self.hidden))

    @property
    def target_mean(self) -> float:
        return float(self.feature_mean[0])

    @property
    def target_scale(self) -> float:
        return float(self.feature_scale[0])

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        z = (windows - self.feature_mean) / self.feature_scale
        return z.reshape(z.shape[0], -1)

    def raw_batch(self, windows: np.ndarray) -> np.ndarray:
        windows = _check_windows(self, windows)
        W1, b1, w2, b2 = self._unpacked
        a = np.tanh(self.normalize(windows) @ W1.T + b1)
        return (a @ w2 + b2) * self.target_scale + self.target_mean

    def predict_batch(self, windows: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_batch(windows), 0.0, CGM_MAX)

    def gradient_batch(self, windows: np.ndarray) -> np.ndarray:
        windows = _check_windows(self, windows)
        W1, b1, w2, _ = self._unpacked
        a = np.tanh(self.normalize(windows) @ W1.T + b1)
        dz = (1.0 - a * a) * w2  # (n, hidden)
        dx = dz @ W1  # d out / d normalised input, (n, h*f)
        dx = dx.reshape(-1, self.history_len, self.n_features)[:, :, 0]
        return dx * (self.target_scale / self.feature_scale[0])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "patient_id": self.patient_id,
            "history_len": self.history_len,
            "horizon": self.horizon,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "normalization": {
                "mean": self.feature_mean.tolist(),
                "scale": self.feature_scale.tolist(),
            },
            "params": self.params.tolist(),
            "train_seed": self.train_seed,
            "train_rmse": self.train_rmse,
            "epochs": self.epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastModel":
        return cls(
            mode=d["mode"],
            patient_id=d.get("patient_id"),
            history_len=int(d["history_len"]),
            horizon=int(d["horizon"]),
            hidden=int(d["hidden"]),
            params=np.array(d["params"], dtype=float),
            feature_mean=np.array(d["normalization"]["mean"], dtype=float),
            feature_scale=np.array(d["normalization"]["scale"], dtype=float),
            train_seed=int(d["train_seed"]),
            train_rmse=float(d["train_rmse"]),
            epochs=int(d.get("epochs", 0)),
            n_features=int(d.get("n_features", len(FEATURES))),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ForecastModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def n_params(n_inputs: int, hidden: int) -> int:
    return hidden * n_inputs + 2 * hidden + 1


def unpack_params(params: np.ndarray, n_inputs: int, hidden: int):
    if params.size != n_params(n_inputs, hidden):
        raise ValueError(f"expected {n_params(n_inputs, hidden)} parameters, got {params.size}")
    k = hidden * n_inputs
    W1 = params[:k].reshape(hidden, n_inputs)
    b1 = params[k:k + hidden]
    w2 = params[k + hidden:k + 2 * hidden]
    b2 = params[-1]
    return W1, b1, w2, b2


def feature_stats(traces: Sequence[PatientTrace]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([t.feature_matrix() for t in traces])
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def training_windows(
    traces: Sequence[PatientTrace], history_len: int, horizon: int, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for tr in traces:
        try:
            w = windowize(tr, history_len, horizon)
        except ValueError:
            continue
        xs.append(w.features[::stride])
        ys.append(w.targets[::stride])
    if not xs:
        return np.zeros((0, history_len, len(FEATURES))), np.zeros(0)
    return np.concatenate(xs), np.concatenate(ys)


def fit_forecaster(
    traces: Sequence[PatientTrace],
    mode: str = "aggregate",
    history_len: int = 12,
    horizon: int = 6,
    config: TrainConfig = TrainConfig(),
) -> ForecastModel:
    """Fit the reference regressor by full-batch gradient descent.

    Training is deterministic given ``config.seed``. Stops after
    ``max_epochs`` or once the loss improves by less than ``plateau_tol``
    (relative) over ``patience`` epochs.
    """
    traces = list(traces)
    if not traces:
        raise TrainingError("no training traces")
    ids = sorted({t.patient_id for t in traces})
    if mode == "personalized":
        if len(ids) != 1:
            raise TrainingError(f"personalized model needs one patient, got {ids}")
        patient_id = ids[0]
    elif mode == "aggregate":
        patient_id = None
    else:
        raise ValueError(f"unknown mode {mode!r}")

    mean, scale = feature_stats(traces)
    X, y = training_windows(traces, history_len, horizon, config.window_stride)
    d = history_len * len(FEATURES)
    p = n_params(d, config.hidden)
    minimum = p if config.min_windows is None else config.min_windows
    if X.shape[0] < max(minimum, 1):
        raise TrainingError(f"insufficient windows: {X.shape[0]} < {minimum}")

    Z = ((X - mean) / scale).reshape(X.shape[0], -1)
    t = (y - mean[0]) / scale[0]
    n = Z.shape[0]

    rng = np.random.default_rng(config.seed)
    W1 = rng.normal(0.0, 1.0 / np.sqrt(d), (config.hidden, d))
    b1 = np.zeros(config.hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(config.hidden), config.hidden)
    b2 = 0.0
    lr = config.learning_rate
    history: list[float] = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        a = np.tanh(Z @ W1.T + b1)
        err = a @ w2 + b2 - t
        loss = 0.5 * float(err @ err) / n
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.append(loss)
        if len(history) > config.patience:
            past = history[-config.patience - 1]
            if past - loss <= config.plateau_tol * past:
                break
        dz = np.outer(err, w2) * (1.0 - a * a)
        g_w2 = a.T @ err / n
        g_b2 = err.sum() / n
        g_W1 = dz.T @ Z / n
        g_b1 = dz.sum(axis=0) / n
        W1 -= lr * g_W1
        b1 -= lr * g_b1
        w2 -= lr * g_w2
        b2 -= lr * g_b2

    params = np.concatenate([W1.ravel(), b1, w2, [b2]])
    model = ForecastModel(
        mode=mode,
        patient_id=patient_id,
        history_len=history_len,
        horizon=horizon,
        hidden=config.hidden,
        params=params,
        feature_mean=mean,
        feature_scale=scale,
        train_seed=config.seed,
        epochs=epoch,
    )
    rmse = float(np.sqrt(np.mean((model.predict_batch(X) - y) ** 2)))
    log.info("fit %s model%s: %d windows, %d epochs, rmse %.2f",
             mode, f" for {patient_id}" if patient_id else "", n, epoch, rmse)
    return replace(model, train_rmse=rmse)


def rmse(model: Forecaster, windows: Windows) -> float:
    pred = model.predict_batch(windows.features)
    return float(np.sqrt(np.mean((pred - windows.targets) ** 2)))
