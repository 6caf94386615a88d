"""Command-line interface: fit GARCH models, train forecasters, compare.

Commands write CSV and key-value artifacts under --output-dir.  Settings come
from built-in defaults, then an optional `key = value` config file, then
flags, each layer overriding the previous one.  All randomness flows from the
--seed and --synthetic values, so reruns with identical settings produce
byte-identical artifacts.  On failure every partially written artifact is
removed and the exit code is 2 for invalid settings or input data, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .garch import (
    GarchConstraintError,
    GarchDataError,
    GarchFitError,
    GarchParams,
    fit_mle,
    garch_filter,
    garch_simulate,
)
from .layers import CapacityError, save_params
from .pipeline import (
    DataError,
    PriceSeries,
    load_price_csv,
    log_returns,
    prepare_dataset,
    rolling_volatility,
)
from .training import TrainConfig, TrainError, compare_models, predict_scaled, save_report
from .training import train as train_model

SYNTHETIC_GARCH = GarchParams(0.1, (0.1,), (0.8,))
SYNTHETIC_N = 2000
SYNTHETIC_P0 = 100.0

DEFAULTS = {
    "input": None,
    "synthetic": None,
    "output_dir": ".",
    "seed": 42,
    "epochs": 1000,
    "lr": 0.001,
    "hidden": 64,
    "window": 5,
    "split": 0.8,
    "model": "lstm",
    "af_variant": "simple",
    "garch": "garch",
    "scaler": "minmax",
}

_PARSERS = {
    "input": str,
    "synthetic": int,
    "output_dir": str,
    "seed": int,
    "epochs": int,
    "lr": float,
    "hidden": int,
    "window": int,
    "split": float,
    "model": str,
    "af_variant": str,
    "garch": str,
    "scaler": str,
}

_CHOICES = {
    "model": ("lstm", "af-lstm"),
    "af_variant": ("simple", "position-bias"),
    "garch": ("garch", "gjr"),
    "scaler": ("minmax", "standard"),
}


class ConfigError(ValueError):
    """Invalid flag value, config-file entry, or flag combination."""


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one command; numeric checks run before any I/O."""

    command: str
    input: Optional[str]
    synthetic: Optional[int]
    output_dir: str
    seed: int
    epochs: int
    lr: float
    hidden: int
    window: int
    split: float
    model: str
    af_variant: str
    garch: str
    scaler: str

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {self.seed}")
        if self.synthetic is not None and self.synthetic < 0:
            raise ConfigError(f"--synthetic must be non-negative, got {self.synthetic}")
        if self.epochs < 1:
            raise ConfigError(f"--epochs must be at least 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"--lr must be positive, got {self.lr}")
        if self.hidden < 1:
            raise ConfigError(f"--hidden must be at least 1, got {self.hidden}")
        if self.window < 2:
            raise ConfigError(f"--window must be at least 2, got {self.window}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"--split must be inside (0, 1), got {self.split}")
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                flag = "--" + key.replace("_", "-")
                raise ConfigError(f"{flag} must be one of {allowed}, got {getattr(self, key)!r}")


class ArtifactSet:
    """Records artifact paths as they are opened so a failed run can remove them."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        os.makedirs(self.out_dir, exist_ok=True)
        p = self.out_dir / name
        self.written.append(p)
        return p

    def discard(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)


def synthetic_prices(seed: int, n: int = SYNTHETIC_N) -> PriceSeries:
    """GARCH(1,1) log returns compounded from a base price of 100."""
    sim = garch_simulate(SYNTHETIC_GARCH, n - 1, seed=seed)
    log_price = np.concatenate([[0.0], np.cumsum(sim.returns)])
    return PriceSeries(np.arange(n, dtype=np.float64), SYNTHETIC_P0 * np.exp(log_price))


def read_config_file(path) -> dict:
    """Parse a flat `key = value` file; keys use flag spelling without dashes."""
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value', got {line!r}")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in _PARSERS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            try:
                values[key] = _PARSERS[key](value)
            except ValueError:
                raise ConfigError(f"{path}: line {lineno}: invalid value {value!r} for {key!r}") from None
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, and flags; flags win."""
    merged = dict(DEFAULTS)
    if args.config is not None:
        merged.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return RunConfig(command=args.command, **merged)


def _load_series(cfg: RunConfig) -> PriceSeries:
    if (cfg.input is None) == (cfg.synthetic is None):
        raise ConfigError("provide exactly one of --input and --synthetic")
    if cfg.input is not None:
        if not os.path.isfile(cfg.input):
            raise ConfigError(f"input file {cfg.input!r} does not exist")
        return load_price_csv(cfg.input)
    return synthetic_prices(cfg.synthetic)


def _train_config(cfg: RunConfig, model: str) -> TrainConfig:
    return TrainConfig(
        model=model.replace("-", "_"),
        seed=cfg.seed,
        epochs=cfg.epochs,
        learning_rate=cfg.lr,
        hidden=cfg.hidden,
        variant=cfg.af_variant.replace("-", "_"),
    )


def _write_garch_params(path, kind: str, params: GarchParams, loglik: float) -> None:
    with open(path, "w") as fh:
        fh.write(f"kind = {kind}\n")
        fh.write(f"omega = {params.omega!r}\n")
        fh.write(f"alpha = {params.alpha[0]!r}\n")
        fh.write(f"beta = {params.beta[0]!r}\n")
        if kind == "gjr" and params.gamma is not None:
            fh.write(f"gamma = {params.gamma[0]!r}\n")
        fh.write(f"loglik = {loglik!r}\n")


def _write_predictions(path, params, dataset, variant: str) -> None:
    scaled = predict_scaled(params, dataset, "all", variant)
    predicted = dataset.y_scaler.inverse_transform(scaled).reshape(-1)
    actual = dataset.y_scaler.inverse_transform(dataset.y).reshape(-1)
    window = dataset.window
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "actual_vol", "predicted_vol", "split"])
        # Sample j targets the realized volatility at return step 2*window + j.
        for j in range(dataset.n_samples):
            writer.writerow(
                [
                    2 * window + j,
                    repr(float(actual[j])),
                    repr(float(predicted[j])),
                    "train" if j < dataset.split_index else "test",
                ]
            )


def cmd_fit_garch(cfg: RunConfig, artifacts: ArtifactSet) -> None:
    series = _load_series(cfg)
    returns = log_returns(series)
    params, loglik = fit_mle(returns, cfg.garch)
    vol = rolling_volatility(returns, cfg.window)
    sigma = np.sqrt(garch_filter(params, returns, cfg.garch).sigma2)

    params_path = artifacts.path("garch_params.txt")
    _write_garch_params(params_path, cfg.garch, params, loglik)
    vol_path = artifacts.path("garch_vol.csv")
    with open(vol_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "realized_vol", "garch_vol"])
        for t in range(cfg.window, len(returns)):
            writer.writerow([t, repr(float(vol[t])), repr(float(sigma[t]))])

    pieces = [f"omega={params.omega:.6f}", f"alpha={params.alpha[0]:.6f}", f"beta={params.beta[0]:.6f}"]
    if cfg.garch == "gjr" and params.gamma is not None:
        pieces.append(f"gamma={params.gamma[0]:.6f}")
    print(f"fitted {cfg.garch}: {' '.join(pieces)} loglik={loglik:.6f}")
    for p in artifacts.written:
        print(f"wrote {p}")


def cmd_train(cfg: RunConfig, artifacts: ArtifactSet) -> None:
    series = _load_series(cfg)
    result = prepare_dataset(series, kind=cfg.garch, window=cfg.window, split=cfg.split, scaler=cfg.scaler)
    config = _train_config(cfg, cfg.model)
    params, report = train_model(result.dataset, config)

    save_report(report, artifacts.path("report.csv"))
    save_params(artifacts.path("model_params.txt"), params, seed=cfg.seed, variant=config.variant)
    _write_predictions(artifacts.path("predictions.csv"), params, result.dataset, config.variant)

    print(f"{report.model}: train RMSE {report.rmse_train:.6f}, test RMSE {report.rmse_test:.6f}")
    for p in artifacts.written:
        print(f"wrote {p}")


def cmd_compare(cfg: RunConfig, artifacts: ArtifactSet) -> None:
    series = _load_series(cfg)
    result = prepare_dataset(series, kind=cfg.garch, window=cfg.window, split=cfg.split, scaler=cfg.scaler)
    outcome = compare_models(result.dataset, _train_config(cfg, "lstm"), _train_config(cfg, "af-lstm"))

    save_report(outcome.lstm_report, artifacts.path("lstm_report.csv"))
    save_report(outcome.af_report, artifacts.path("af_lstm_report.csv"))
    summary_path = artifacts.path("summary.csv")
    rows = [
        ("Train Set", outcome.lstm_report.rmse_train, outcome.af_report.rmse_train),
        ("Test Set", outcome.lstm_report.rmse_test, outcome.af_report.rmse_test),
    ]
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "LSTM RMSE", "AF-LSTM RMSE"])
        for name, lstm_rmse, af_rmse in rows:
            writer.writerow([name, repr(lstm_rmse), repr(af_rmse)])

    print(f"{'':<10} {'LSTM RMSE':>12} {'AF-LSTM RMSE':>14}")
    for name, lstm_rmse, af_rmse in rows:
        print(f"{name:<10} {lstm_rmse:>12.6f} {af_rmse:>14.6f}")
    for p in artifacts.written:
        print(f"wrote {p}")


def cmd_simulate(cfg: RunConfig, artifacts: ArtifactSet) -> None:
    if cfg.input is not None:
        raise ConfigError("simulate generates data and does not accept --input")
    seed = cfg.synthetic if cfg.synthetic is not None else cfg.seed
    series = synthetic_prices(seed)
    path = artifacts.path("prices.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "close"])
        for t, close in zip(series.timestamps, series.close):
            writer.writerow([int(t), repr(float(close))])
    print(f"wrote {path} ({len(series)} rows, seed {seed})")


_COMMANDS = {
    "fit-garch": cmd_fit_garch,
    "train": cmd_train,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def run(cfg: RunConfig) -> None:
    artifacts = ArtifactSet(Path(cfg.output_dir))
    try:
        _COMMANDS[cfg.command](cfg, artifacts)
    except BaseException:
        artifacts.discard()
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afvol",
        description="Fit GARCH volatility models and benchmark an attention-free LSTM forecaster against a plain LSTM.",
    )
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--input", metavar="CSV", help="price CSV with a 'timestamp,close' header")
    shared.add_argument(
        "--synthetic",
        type=int,
        metavar="SEED",
        help="generate a synthetic GARCH(1,1) price path (omega 0.1, alpha 0.1, beta 0.8, "
        f"{SYNTHETIC_N} prices) instead of reading --input (default: off)",
    )
    shared.add_argument("--config", metavar="FILE", help="key = value settings file; flags override it (default: none)")
    shared.add_argument("--output-dir", dest="output_dir", metavar="DIR", help=f"artifact directory (default: {DEFAULTS['output_dir']})")
    shared.add_argument("--seed", type=int, help=f"model initialization seed (default: {DEFAULTS['seed']})")
    shared.add_argument("--epochs", type=int, help=f"training epochs (default: {DEFAULTS['epochs']})")
    shared.add_argument("--lr", type=float, help=f"Adam learning rate (default: {DEFAULTS['lr']})")
    shared.add_argument("--hidden", type=int, help=f"LSTM hidden size (default: {DEFAULTS['hidden']})")
    shared.add_argument("--window", type=int, help=f"rolling-volatility window (default: {DEFAULTS['window']})")
    shared.add_argument("--split", type=float, help=f"train fraction of samples (default: {DEFAULTS['split']})")
    shared.add_argument("--model", choices=list(_CHOICES["model"]), help=f"forecaster to train (default: {DEFAULTS['model']})")
    shared.add_argument(
        "--af-variant",
        dest="af_variant",
        choices=list(_CHOICES["af_variant"]),
        help=f"attention-free block variant (default: {DEFAULTS['af_variant']})",
    )
    shared.add_argument("--garch", choices=list(_CHOICES["garch"]), help=f"volatility model kind (default: {DEFAULTS['garch']})")
    shared.add_argument("--scaler", choices=list(_CHOICES["scaler"]), help=f"feature scaling mode (default: {DEFAULTS['scaler']})")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit-garch", parents=[shared], help="fit a GARCH model and write its volatility path")
    sub.add_parser("train", parents=[shared], help="train one forecaster end to end")
    sub.add_parser("compare", parents=[shared], help="train both forecasters and summarize their RMSEs")
    sub.add_parser("simulate", parents=[shared], help="write a synthetic GARCH price CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(build_run_config(args))
    except (ConfigError, DataError, GarchDataError, GarchConstraintError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GarchFitError, TrainError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
