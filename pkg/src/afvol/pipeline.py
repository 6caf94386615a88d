"""Close prices to windowed training data: returns, volatilities, scaling.

Steps: log returns; realized volatility as the population standard deviation
of the trailing `window` returns (strictly past, so no look-ahead); a GARCH
model fitted on the training portion only and filtered through the full
series; min-max (or mean/std) scalers fitted on training rows; sliding
windows of scaled feature rows paired with the next-step realized
volatility.  The train/test split is applied to whole windows, so no window
straddles the boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from .garch import GarchParams, fit_mle, garch_filter

WINDOW = 5
SCALER_MODES = ("minmax", "standard")


class DataError(ValueError):
    """Input data violates a documented precondition."""


@dataclass(frozen=True)
class PriceSeries:
    """Strictly increasing timestamps (epoch seconds) with positive closes."""

    timestamps: np.ndarray
    close: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.float64))
        object.__setattr__(self, "close", np.asarray(self.close, dtype=np.float64))
        if self.timestamps.ndim != 1 or self.timestamps.shape != self.close.shape:
            raise DataError("timestamps and close must be equal-length vectors")
        if len(self.close) < 30:
            raise DataError(f"need at least 30 prices, got {len(self.close)}")
        steps = np.diff(self.timestamps)
        if np.any(steps <= 0):
            idx = int(np.argmax(steps <= 0))
            raise DataError(f"timestamps must be strictly increasing (violated at index {idx + 1})")
        if np.any(self.close <= 0):
            idx = int(np.argmax(self.close <= 0))
            raise DataError(f"close prices must be positive (violated at index {idx})")

    def __len__(self) -> int:
        return len(self.close)


@dataclass(frozen=True)
class FeatureFrame:
    """Aligned realized volatility, GARCH volatility and next-step target.

    Row i corresponds to return step window + i; frames built from clean
    series contain no NaN.
    """

    realized_vol: np.ndarray
    garch_vol: np.ndarray
    target: np.ndarray
    window: int = WINDOW

    def __post_init__(self):
        for name in ("realized_vol", "garch_vol", "target"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (len(self.realized_vol) == len(self.garch_vol) == len(self.target)):
            raise DataError("feature columns must have equal lengths")

    def __len__(self) -> int:
        return len(self.target)


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature affine map to (0,1): transform(v) = (v - min) / (max - min)."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.atleast_1d(np.asarray(self.min, dtype=np.float64)))
        object.__setattr__(self, "max", np.atleast_1d(np.asarray(self.max, dtype=np.float64)))
        if self.min.shape != self.max.shape or self.min.ndim != 1:
            raise DataError("scaler min and max must be equal-length vectors")
        if np.any(self.max <= self.min):
            raise DataError("scaler requires max > min for every feature")

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass(frozen=True)
class WindowedDataset:
    """Scaled windows [samples x window x 2], scalar targets, fitted scalers.

    Samples [0, split_index) are the training set.  Test rows are transformed
    with the train-fitted scalers and may leave [0, 1].
    """

    x: np.ndarray
    y: np.ndarray
    x_scaler: ScalerParams
    y_scaler: ScalerParams
    split_index: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if self.x.ndim != 3 or len(self.x) != len(self.y) or self.y.ndim != 1:
            raise DataError(f"expected x [samples x window x features] aligned with y, got {self.x.shape} and {self.y.shape}")
        if not 0 < self.split_index < len(self.y):
            raise DataError(f"split index {self.split_index} leaves an empty partition")

    @property
    def window(self) -> int:
        return self.x.shape[1]

    @property
    def n_samples(self) -> int:
        return len(self.y)


def log_returns(prices) -> np.ndarray:
    """r_t = ln(p_t / p_{t-1}); accepts a PriceSeries or a raw sequence."""
    p = prices.close if isinstance(prices, PriceSeries) else np.asarray(prices, dtype=np.float64)
    if p.ndim != 1 or len(p) < 2:
        raise DataError(f"need at least 2 prices, got {len(p)}")
    if np.any(p <= 0):
        idx = int(np.argmax(p <= 0))
        raise DataError(f"prices must be positive (violated at index {idx})")
    return np.diff(np.log(p))


def rolling_volatility(returns, window: int = WINDOW) -> np.ndarray:
    """Population std of the `window` returns strictly before each step.

    Output aligns with the input; the first `window` entries are NaN warm-up.
    """
    r = np.asarray(returns, dtype=np.float64)
    if window < 2:
        raise ValueError(f"window must be at least 2, got {window}")
    if r.ndim != 1 or len(r) < window:
        raise DataError(f"need at least {window} returns, got {len(r)}")
    out = np.full(len(r), np.nan)
    if len(r) > window:
        trailing = np.lib.stride_tricks.sliding_window_view(r, window)
        out[window:] = trailing[: len(r) - window].std(axis=1)
    return out


def build_features(
    returns,
    params: GarchParams,
    kind: str = "garch",
    *,
    window: int = WINDOW,
    mean: Optional[float] = None,
    sigma0_sq: Optional[float] = None,
) -> FeatureFrame:
    """Pair realized volatility with the GARCH conditional volatility.

    Row i covers return step t = window + i for t up to len(returns) - 2:
    realized_vol[i] uses returns before t, garch_vol[i] is the conditional
    sigma for t, and target[i] is the realized volatility one step later.
    Pass the training-window mean and variance to keep the filter free of
    test-set statistics.
    """
    r = np.asarray(returns, dtype=np.float64)
    if len(r) < window + 2:
        raise DataError(f"need at least {window + 2} returns to build one row, got {len(r)}")
    vol = rolling_volatility(r, window)
    path = garch_filter(params, r, kind, mean=mean, sigma0_sq=sigma0_sq)
    sigma = np.sqrt(path.sigma2)
    return FeatureFrame(vol[window:-1], sigma[window:-1], vol[window + 1 :], window)


def fit_scaler(values: np.ndarray, mode: str = "minmax", names: Optional[tuple[str, ...]] = None) -> ScalerParams:
    """Fit per-column scaler parameters; errors name any degenerate feature."""
    if mode not in SCALER_MODES:
        raise ValueError(f"scaler mode must be one of {SCALER_MODES}, got {mode!r}")
    arr = np.asarray(values, dtype=np.float64)
    cols = arr.reshape(len(arr), -1)
    if mode == "minmax":
        lo, hi = cols.min(axis=0), cols.max(axis=0)
    else:
        mu, sd = cols.mean(axis=0), cols.std(axis=0)
        lo, hi = mu, mu + sd
    spread = hi - lo
    if np.any(spread <= 0):
        j = int(np.argmax(spread <= 0))
        name = names[j] if names is not None else f"column {j}"
        raise DataError(f"feature {name!r} is degenerate on the training rows")
    return ScalerParams(lo, hi)


def fit_transform_scalers(frame: FeatureFrame, split: float = 0.8, *, mode: str = "minmax") -> WindowedDataset:
    """Scale the frame with train-fitted scalers and cut it into windows.

    Sample j covers frame rows [j, j+window) and targets the scaled
    realized volatility of the step after its last row.  The split keeps
    whole windows: samples below floor(split * n_samples) are train, and the
    scalers see only rows and targets those train windows consume.
    """
    if not 0.0 < split < 1.0:
        raise DataError(f"split must be inside (0, 1), got {split}")
    window = frame.window
    n_samples = len(frame) - window + 1
    if n_samples < 2:
        raise DataError(f"need at least 2 windows, got {max(n_samples, 0)} from {len(frame)} rows")
    split_index = math.floor(split * n_samples)
    if not 0 < split_index < n_samples:
        raise DataError(f"split {split} leaves an empty partition for {n_samples} windows")

    x_cols = np.column_stack([frame.realized_vol, frame.garch_vol])
    train_rows = split_index + window - 1
    x_scaler = fit_scaler(x_cols[:train_rows], mode, names=("realized_vol", "garch_vol"))
    y_scaler = fit_scaler(frame.target[window - 1 : train_rows], mode, names=("target",))

    scaled_x = x_scaler.transform(x_cols)
    scaled_y = y_scaler.transform(frame.target).reshape(-1)
    x = np.stack([scaled_x[j : j + window] for j in range(n_samples)])
    y = scaled_y[window - 1 : window - 1 + n_samples]
    return WindowedDataset(x, y, x_scaler, y_scaler, split_index)


@dataclass(frozen=True)
class PipelineResult:
    dataset: WindowedDataset
    frame: FeatureFrame
    garch_params: GarchParams
    garch_loglik: Optional[float]


def prepare_dataset(
    prices,
    *,
    kind: str = "garch",
    window: int = WINDOW,
    split: float = 0.8,
    scaler: str = "minmax",
    garch_params: Optional[GarchParams] = None,
) -> PipelineResult:
    """Full pipeline from prices to a WindowedDataset.

    The GARCH model and the filter's seed statistics come from the first
    floor(split * n) returns, so nothing downstream of the split leaks into
    the features.
    """
    returns = log_returns(prices)
    k = math.floor(split * len(returns))
    if k < 2:
        raise DataError(f"training portion has only {k} returns")
    loglik: Optional[float] = None
    if garch_params is None:
        garch_params, loglik = fit_mle(returns[:k], kind)
    else:
        garch_params.validate(kind)
    mu = float(np.mean(returns[:k]))
    s0 = float(np.var(returns[:k]))
    frame = build_features(returns, garch_params, kind, window=window, mean=mu, sigma0_sq=s0)
    dataset = fit_transform_scalers(frame, split, mode=scaler)
    return PipelineResult(dataset, frame, garch_params, loglik)


def load_price_csv(path) -> PriceSeries:
    """Read a `timestamp,close` CSV; timestamps are ISO-8601 or epoch seconds.

    Rows are sorted by timestamp; duplicates and malformed rows raise a
    DataError carrying the line number.
    """
    rows: list[tuple[float, float, int]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["timestamp", "close"]:
            raise DataError(f"expected header 'timestamp,close', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"line {lineno}: expected 2 fields, got {len(row)}")
            ts = _parse_timestamp(row[0].strip(), lineno)
            try:
                close = float(row[1])
            except ValueError:
                raise DataError(f"line {lineno}: close {row[1]!r} is not a number") from None
            rows.append((ts, close, lineno))
    if not rows:
        raise DataError("no data rows")
    rows.sort(key=lambda item: item[0])
    for (t0, _, l0), (t1, _, l1) in zip(rows, rows[1:]):
        if t1 == t0:
            raise DataError(f"duplicate timestamp (lines {l0} and {l1})")
    return PriceSeries(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))


def _parse_timestamp(text: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    iso = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        stamp = datetime.fromisoformat(iso)
    except ValueError:
        raise DataError(f"line {lineno}: timestamp {text!r} is neither epoch seconds nor ISO-8601") from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def dump_frame(frame: FeatureFrame, split_index: int, path) -> None:
    """Write `t,realized_vol,garch_vol,target,split` rows for inspection.

    Row i is train while its window sample (if any) falls before the split,
    i.e. while i < split_index + window - 1.
    """
    boundary = split_index + frame.window - 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "realized_vol", "garch_vol", "target", "split"])
        for i in range(len(frame)):
            writer.writerow(
                [
                    frame.window + i,
                    repr(float(frame.realized_vol[i])),
                    repr(float(frame.garch_vol[i])),
                    repr(float(frame.target[i])),
                    "train" if i < boundary else "test",
                ]
            )
