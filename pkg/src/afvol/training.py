"""Full-batch Adam training for the LSTM and AF-LSTM volatility models.

Each epoch records the train and test losses at the epoch's starting
parameters, then applies one bias-corrected Adam update from the train-set
gradient.  The test partition is only ever evaluated, never differentiated,
so it cannot influence the fit.  Runs are deterministic given the seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import (
    AfLstmParams,
    LstmModelParams,
    af_lstm_predict,
    bind,
    init_params,
    lstm_predict,
    named_arrays,
)
from .pipeline import WindowedDataset

MODELS = ("lstm", "af_lstm")


class TrainError(RuntimeError):
    """Training aborted (divergence or non-finite gradients)."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults follow the reference configuration."""

    model: str
    seed: int = 42
    epochs: int = 1000
    learning_rate: float = 0.001
    hidden: int = 64
    dim: int = 2
    variant: str = "simple"
    clip_norm: Optional[float] = 5.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.hidden < 1 or self.dim < 1:
            raise ValueError("hidden and dim must be positive")
        if self.variant not in ("simple", "position_bias"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in named_arrays(params)},
            v={name: np.zeros_like(arr) for name, arr in named_arrays(params)},
        )


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch loss curves plus final RMSE in unscaled volatility units."""

    model: str
    train_loss_curve: np.ndarray
    test_loss_curve: np.ndarray
    rmse_train: float
    rmse_test: float
    config: TrainConfig

    def __post_init__(self):
        object.__setattr__(self, "train_loss_curve", np.asarray(self.train_loss_curve, dtype=np.float64))
        object.__setattr__(self, "test_loss_curve", np.asarray(self.test_loss_curve, dtype=np.float64))
        if len(self.train_loss_curve) != self.config.epochs or len(self.test_loss_curve) != self.config.epochs:
            raise ValueError("loss curves must have one entry per epoch")
        if self.rmse_train < 0 or self.rmse_test < 0:
            raise ValueError("RMSE cannot be negative")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error as a differentiable tape node."""
    diff = ad.sub(pred, target)
    return ad.mean_all(ad.mul(diff, diff))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> AdamState:
    """One in-place bias-corrected Adam update; returns the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, arr in arrays.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        arr -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def _predict_fn(config: TrainConfig):
    if config.model == "af_lstm":
        return lambda bound, steps: af_lstm_predict(bound, steps, variant=config.variant)[0]
    return lambda bound, steps: lstm_predict(bound, steps)[0]


def _init_model(config: TrainConfig, n_features: int, window: int):
    if config.model == "af_lstm":
        t_max = window if config.variant == "position_bias" else None
        return init_params(
            "af_lstm",
            config.seed,
            input_size=n_features,
            hidden_size=config.hidden,
            dim=config.dim,
            t_max=t_max,
        )
    return init_params("lstm_model", config.seed, input_size=n_features, hidden_size=config.hidden)


def _batch_steps(tape: Tape, block: np.ndarray) -> list[Tensor]:
    return [tape.tensor(np.ascontiguousarray(block[:, t, :])) for t in range(block.shape[1])]


def train(dataset: WindowedDataset, config: TrainConfig):
    """Fit one model on the train partition; returns (params, TrainReport)."""
    s = dataset.split_index
    x_train, x_test = dataset.x[:s], dataset.x[s:]
    y_train = dataset.y[:s].reshape(-1, 1)
    y_test = dataset.y[s:].reshape(-1, 1)
    params = _init_model(config, dataset.x.shape[2], dataset.window)
    arrays = dict(named_arrays(params))
    state = AdamState.for_params(params)
    predict = _predict_fn(config)

    train_curve = np.empty(config.epochs)
    test_curve = np.empty(config.epochs)
    train_blocks = [np.ascontiguousarray(x_train[:, t, :]) for t in range(dataset.window)]
    test_blocks = [np.ascontiguousarray(x_test[:, t, :]) for t in range(dataset.window)]

    for epoch in range(config.epochs):
        tape = Tape()
        bound = bind(tape, params)
        loss = mse_loss(predict(bound, [tape.tensor(b) for b in train_blocks]), tape.tensor(y_train))
        train_value = loss.item()
        if not np.isfinite(train_value):
            raise TrainError(f"training diverged at epoch {epoch + 1}: loss is not finite", epoch=epoch + 1)
        test_loss = mse_loss(predict(bound, [tape.tensor(b) for b in test_blocks]), tape.tensor(y_test))
        train_curve[epoch] = train_value
        test_curve[epoch] = test_loss.item()

        table = tape.backward(loss)
        grads = {name: table[bound[name].node_id].reshape(arr.shape) for name, arr in arrays.items()}
        if config.clip_norm is not None:
            clip_global_norm(grads, config.clip_norm)
        try:
            adam_step(arrays, grads, state, config.learning_rate)
        except TrainError as err:
            raise TrainError(f"epoch {epoch + 1}: {err}", epoch=epoch + 1) from None

    report = TrainReport(
        model=config.model,
        train_loss_curve=train_curve,
        test_loss_curve=test_curve,
        rmse_train=evaluate_rmse(params, dataset, "train", variant=config.variant),
        rmse_test=evaluate_rmse(params, dataset, "test", variant=config.variant),
        config=config,
    )
    return params, report


def rmse(actual: np.ndarray, predicted: np.ndarray) -> float:
    """sqrt(mean((actual - predicted)**2))."""
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if actual.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {actual.shape} vs {predicted.shape}")
    return float(np.sqrt(np.mean((actual - predicted) ** 2)))


def predict_scaled(params, dataset: WindowedDataset, partition: str = "all", variant: str = "simple") -> np.ndarray:
    """Model outputs (still in scaled units) for a dataset partition."""
    if partition == "train":
        block = dataset.x[: dataset.split_index]
    elif partition == "test":
        block = dataset.x[dataset.split_index :]
    elif partition == "all":
        block = dataset.x
    else:
        raise ValueError(f"partition must be train, test or all, got {partition!r}")
    tape = Tape()
    bound = bind(tape, params)
    steps = _batch_steps(tape, block)
    if isinstance(params, AfLstmParams):
        pred, _ = af_lstm_predict(bound, steps, variant=variant)
    elif isinstance(params, LstmModelParams):
        pred, _ = lstm_predict(bound, steps)
    else:
        raise TypeError(f"cannot predict with parameter type {type(params).__name__}")
    return pred.data[:, 0].copy()


def evaluate_rmse(params, dataset: WindowedDataset, partition: str, *, variant: str = "simple") -> float:
    """RMSE in original volatility units: inverse-scale, then compare."""
    scaled_pred = predict_scaled(params, dataset, partition, variant)
    if partition == "train":
        scaled_actual = dataset.y[: dataset.split_index]
    elif partition == "test":
        scaled_actual = dataset.y[dataset.split_index :]
    else:
        scaled_actual = dataset.y
    actual = dataset.y_scaler.inverse_transform(scaled_actual).reshape(-1)
    predicted = dataset.y_scaler.inverse_transform(scaled_pred).reshape(-1)
    return rmse(actual, predicted)


@dataclass(frozen=True)
class CompareResult:
    lstm_params: LstmModelParams
    lstm_report: TrainReport
    af_params: AfLstmParams
    af_report: TrainReport


def compare_models(dataset: WindowedDataset, config_lstm: TrainConfig, config_af: TrainConfig) -> CompareResult:
    """Train the benchmark LSTM and the AF-LSTM on the same dataset."""
    if config_lstm.model != "lstm" or config_af.model != "af_lstm":
        raise ValueError("compare_models expects one lstm config and one af_lstm config")
    lstm_params, lstm_report = train(dataset, config_lstm)
    af_params, af_report = train(dataset, config_af)
    return CompareResult(lstm_params, lstm_report, af_params, af_report)


def save_report(report: TrainReport, path) -> None:
    """Write `epoch,train_loss,test_loss` rows plus an `rmse,...` summary row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "test_loss"])
        for epoch, (tr, te) in enumerate(zip(report.train_loss_curve, report.test_loss_curve), start=1):
            writer.writerow([epoch, repr(float(tr)), repr(float(te))])
        writer.writerow(["rmse", repr(report.rmse_train), repr(report.rmse_test)])
