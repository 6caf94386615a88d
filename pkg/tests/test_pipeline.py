"""Tests for the price-to-dataset pipeline.

Oracles: exact log/exp round trips, hand-computed rolling windows,
brute-force window index enumeration, and a poisoned-series check that no
future value can reach a training sample.
"""

import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from afvol.garch import GarchDataError, GarchParams, garch_simulate
from afvol.pipeline import (
    DataError,
    FeatureFrame,
    PriceSeries,
    ScalerParams,
    build_features,
    dump_frame,
    fit_scaler,
    fit_transform_scalers,
    load_price_csv,
    log_returns,
    prepare_dataset,
    rolling_volatility,
)

RNG_SEED = 20240819


def synthetic_series(n, seed, scale=0.01):
    sim = garch_simulate(GarchParams(0.1, (0.1,), (0.8,)), n - 1, seed=seed)
    prices = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(scale * sim.returns)]))
    return PriceSeries(np.arange(n, dtype=float), prices), sim


class TestPriceSeries:
    def test_needs_thirty_prices(self):
        with pytest.raises(DataError, match="at least 30"):
            PriceSeries(np.arange(10.0), np.full(10, 100.0))

    def test_rejects_non_increasing_timestamps(self):
        ts = np.arange(40.0)
        ts[7] = ts[6]
        with pytest.raises(DataError, match="index 7"):
            PriceSeries(ts, np.full(40, 100.0))

    def test_rejects_non_positive_close(self):
        close = np.full(40, 100.0)
        close[3] = 0.0
        with pytest.raises(DataError, match="index 3"):
            PriceSeries(np.arange(40.0), close)

    def test_length(self):
        series = PriceSeries(np.arange(35.0), np.full(35, 2.0))
        assert len(series) == 35


class TestLogReturns:
    def test_flat_prices_give_zero(self):
        np.testing.assert_array_equal(log_returns([100.0, 100.0]), [0.0])

    def test_ten_percent_move(self):
        assert log_returns([100.0, 110.0])[0] == pytest.approx(math.log(1.1), rel=1e-15)

    def test_round_trip_reconstructs_prices(self):
        rng = np.random.default_rng(RNG_SEED)
        r = rng.standard_normal(49) * 0.02
        prices = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(r)]))
        back = log_returns(prices)
        np.testing.assert_allclose(back, r, rtol=1e-12, atol=1e-15)
        rebuilt = prices[0] * np.exp(np.cumsum(back))
        np.testing.assert_allclose(rebuilt, prices[1:], rtol=1e-12)

    def test_rejects_non_positive_price_with_index(self):
        with pytest.raises(DataError, match="index 1"):
            log_returns([100.0, -5.0, 100.0])

    def test_accepts_price_series(self):
        series = PriceSeries(np.arange(30.0), np.linspace(100.0, 130.0, 30))
        np.testing.assert_array_equal(log_returns(series), log_returns(series.close))


class TestRollingVolatility:
    def test_constant_returns_give_zero_after_warmup(self):
        vol = rolling_volatility(np.full(12, 0.03))
        assert np.isnan(vol[:5]).all()
        np.testing.assert_array_equal(vol[5:], 0.0)

    def test_alternating_window_value(self):
        # population std of [1,-1,1,-1,1] = sqrt(1 - 0.2**2)
        vol = rolling_volatility([1.0, -1.0, 1.0, -1.0, 1.0, 0.0])
        assert vol[5] == pytest.approx(0.9797958971132712, rel=1e-15)

    def test_matches_direct_std_loop(self):
        rng = np.random.default_rng(RNG_SEED)
        r = rng.standard_normal(40)
        vol = rolling_volatility(r)
        for t in range(5, 40):
            assert vol[t] == np.std(r[t - 5 : t])

    def test_translation_equivariance(self):
        rng = np.random.default_rng(RNG_SEED)
        r = rng.standard_normal(30)
        shifted = rolling_volatility(np.concatenate([np.zeros(3), r]))
        base = rolling_volatility(r)
        np.testing.assert_array_equal(shifted[8:], base[5:])

    def test_rejects_short_series(self):
        with pytest.raises(DataError, match="at least 5"):
            rolling_volatility([0.1, 0.2])

    def test_rejects_degenerate_window(self):
        with pytest.raises(ValueError, match="window"):
            rolling_volatility(np.ones(10), window=1)


class TestBuildFeatures:
    def test_degenerate_model_gives_constant_garch_column(self):
        rng = np.random.default_rng(RNG_SEED)
        frame = build_features(rng.standard_normal(40), GarchParams(0.04, (0.0,), (0.0,)))
        np.testing.assert_array_equal(frame.garch_vol, 0.2)

    def test_frame_length(self):
        rng = np.random.default_rng(RNG_SEED)
        for n in (8, 20, 57):
            frame = build_features(rng.standard_normal(n), GarchParams(0.1, (0.1,), (0.8,)))
            assert len(frame) == n - 5 - 1

    def test_target_is_next_step_realized_vol(self):
        rng = np.random.default_rng(RNG_SEED)
        frame = build_features(rng.standard_normal(30), GarchParams(0.1, (0.1,), (0.8,)))
        np.testing.assert_array_equal(frame.target[:-1], frame.realized_vol[1:])

    def test_clean_input_has_no_nan(self):
        rng = np.random.default_rng(RNG_SEED)
        frame = build_features(rng.standard_normal(50), GarchParams(0.1, (0.1,), (0.8,)))
        for col in (frame.realized_vol, frame.garch_vol, frame.target):
            assert np.all(np.isfinite(col))

    def test_garch_feature_tracks_true_volatility(self):
        # Fitted on the train portion only; observed correlation 0.991.
        series, sim = synthetic_series(2000, seed=5)
        result = prepare_dataset(series)
        true_sigma = 0.01 * np.sqrt(sim.sigma2[5:-1])
        corr = np.corrcoef(result.frame.garch_vol, true_sigma)[0, 1]
        assert corr > 0.9

    def test_rejects_too_few_returns(self):
        with pytest.raises(DataError, match="at least 7"):
            build_features(np.ones(6), GarchParams(0.1, (0.1,), (0.8,)))


class TestScalers:
    def test_minmax_definition(self):
        scaler = fit_scaler(np.array([2.0, 4.0, 6.0]))
        np.testing.assert_allclose(scaler.transform(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])

    def test_round_trip(self):
        rng = np.random.default_rng(RNG_SEED)
        values = rng.standard_normal((20, 2)) * 3.0 + 1.0
        scaler = fit_scaler(values)
        np.testing.assert_allclose(scaler.inverse_transform(scaler.transform(values)), values, rtol=1e-12)

    def test_out_of_range_values_exceed_one(self):
        scaler = fit_scaler(np.array([1.0, 2.0]))
        assert scaler.transform(np.array([3.0]))[0] > 1.0

    def test_degenerate_feature_is_named(self):
        values = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        with pytest.raises(DataError, match="garch_vol"):
            fit_scaler(values, names=("realized_vol", "garch_vol"))

    def test_standard_mode_uses_mean_and_std(self):
        rng = np.random.default_rng(RNG_SEED)
        values = rng.standard_normal(30) * 2.0 + 5.0
        scaler = fit_scaler(values, mode="standard")
        scaled = scaler.transform(values).reshape(-1)
        np.testing.assert_allclose(scaled, (values - values.mean()) / values.std(), rtol=1e-12)

    def test_invalid_mode(self):
        with pytest.raises(ValueError, match="mode"):
            fit_scaler(np.arange(5.0), mode="robust")

    def test_scaler_params_validate_spread(self):
        with pytest.raises(DataError, match="max > min"):
            ScalerParams(np.array([1.0]), np.array([1.0]))


def small_frame(rows, seed=RNG_SEED):
    rng = np.random.default_rng(seed)
    realized = rng.uniform(1.0, 2.0, rows)
    garch = rng.uniform(0.5, 1.5, rows)
    target = rng.uniform(1.0, 2.0, rows)
    return FeatureFrame(realized, garch, target)


class TestFitTransformScalers:
    def test_sample_count_and_split(self):
        ds = fit_transform_scalers(small_frame(14))
        assert ds.n_samples == 10
        assert ds.split_index == 8
        assert ds.x.shape == (10, 5, 2)

    def test_window_indexing_brute_force(self):
        frame = small_frame(12)
        ds = fit_transform_scalers(frame)
        scaled_x = ds.x_scaler.transform(np.column_stack([frame.realized_vol, frame.garch_vol]))
        scaled_y = ds.y_scaler.transform(frame.target).reshape(-1)
        for i in range(ds.n_samples):
            for j in range(5):
                np.testing.assert_array_equal(ds.x[i, j], scaled_x[i + j])
            assert ds.y[i] == scaled_y[i + 4]

    def test_train_windows_stay_inside_unit_box(self):
        ds = fit_transform_scalers(small_frame(40))
        train = ds.x[: ds.split_index]
        assert train.min() >= 0.0 and train.max() <= 1.0
        y_train = ds.y[: ds.split_index]
        assert y_train.min() >= 0.0 and y_train.max() <= 1.0

    def test_rejects_bad_split(self):
        with pytest.raises(DataError, match="split"):
            fit_transform_scalers(small_frame(14), split=1.0)

    def test_rejects_too_few_rows(self):
        with pytest.raises(DataError, match="at least 2 windows"):
            fit_transform_scalers(small_frame(5))


class TestNoLookAhead:
    def test_poisoned_future_never_reaches_train_samples(self):
        series, _ = synthetic_series(200, seed=3)
        clean = prepare_dataset(series)
        s = clean.dataset.split_index

        # First return index no train sample depends on; poison everything
        # from there onward via the prices that produce those returns.
        q = 5 + s + 4
        poisoned_close = series.close.copy()
        poisoned_close[q + 1 :] = np.nan
        poisoned_series = PriceSeries(series.timestamps, poisoned_close)
        poisoned = prepare_dataset(poisoned_series, garch_params=clean.garch_params)

        assert poisoned.dataset.split_index == s
        np.testing.assert_array_equal(poisoned.dataset.x[:s], clean.dataset.x[:s])
        np.testing.assert_array_equal(poisoned.dataset.y[:s], clean.dataset.y[:s])
        assert np.all(np.isfinite(poisoned.dataset.x[:s]))
        assert np.all(np.isfinite(poisoned.dataset.y[:s]))
        # The test partition does read the poisoned region.
        assert np.isnan(poisoned.dataset.x[s:]).any()


class TestPrepareDataset:
    def test_end_to_end_shapes_and_determinism(self):
        series, _ = synthetic_series(300, seed=9)
        a = prepare_dataset(series)
        b = prepare_dataset(series)
        n_returns = len(series) - 1
        assert len(a.frame) == n_returns - 6
        assert a.dataset.n_samples == n_returns - 10
        assert a.dataset.split_index == math.floor(0.8 * a.dataset.n_samples)
        np.testing.assert_array_equal(a.dataset.x, b.dataset.x)
        assert a.garch_params == b.garch_params
        assert a.garch_loglik == b.garch_loglik

    def test_explicit_params_skip_fitting(self):
        series, _ = synthetic_series(60, seed=2)
        result = prepare_dataset(series, garch_params=GarchParams(0.1, (0.1,), (0.8,)))
        assert result.garch_loglik is None
        assert result.garch_params.beta == (0.8,)

    def test_short_series_cannot_fit(self):
        series, _ = synthetic_series(40, seed=2)
        with pytest.raises(GarchDataError, match="at least 50"):
            prepare_dataset(series)


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def price_lines(n=40, iso=False):
    lines = ["timestamp,close"]
    start = datetime(2024, 1, 1, tzinfo=timezone.utc)
    for i in range(n):
        if iso:
            stamp = (start + timedelta(days=i)).strftime("%Y-%m-%dT%H:%M:%SZ")
        else:
            stamp = str(1700000000 + 86400 * i)
        lines.append(f"{stamp},{100.0 + i}")
    return lines


class TestCsvLoading:
    def test_epoch_seconds(self, tmp_path):
        series = load_price_csv(write_csv(tmp_path / "a.csv", price_lines()))
        assert len(series) == 40
        assert series.close[0] == 100.0
        assert series.timestamps[1] - series.timestamps[0] == 86400.0

    def test_iso_timestamps(self, tmp_path):
        series = load_price_csv(write_csv(tmp_path / "a.csv", price_lines(iso=True)))
        assert len(series) == 40
        assert series.timestamps[1] - series.timestamps[0] == 86400.0

    def test_zulu_equals_explicit_offset(self, tmp_path):
        base = price_lines(iso=True)
        explicit = [base[0]] + [line.replace("Z,", "+00:00,") for line in base[1:]]
        a = load_price_csv(write_csv(tmp_path / "a.csv", base))
        b = load_price_csv(write_csv(tmp_path / "b.csv", explicit))
        np.testing.assert_array_equal(a.timestamps, b.timestamps)

    def test_rows_are_sorted(self, tmp_path):
        lines = price_lines()
        lines[1:] = lines[1:][::-1]
        series = load_price_csv(write_csv(tmp_path / "a.csv", lines))
        assert np.all(np.diff(series.timestamps) > 0)
        assert series.close[0] == 100.0

    def test_duplicate_timestamps_rejected(self, tmp_path):
        lines = price_lines()
        lines.append(lines[5])
        with pytest.raises(DataError, match="duplicate"):
            load_price_csv(write_csv(tmp_path / "a.csv", lines))

    def test_bad_close_names_line(self, tmp_path):
        lines = price_lines()
        lines[2] = "1700086400,not-a-price"
        with pytest.raises(DataError, match="line 3"):
            load_price_csv(write_csv(tmp_path / "a.csv", lines))

    def test_bad_timestamp_names_line(self, tmp_path):
        lines = price_lines()
        lines[1] = "yesterday,100.0"
        with pytest.raises(DataError, match="line 2"):
            load_price_csv(write_csv(tmp_path / "a.csv", lines))

    def test_wrong_header(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_price_csv(write_csv(tmp_path / "a.csv", ["date,price", "1,100"]))

    def test_empty_file_reports_no_data_rows(self, tmp_path):
        with pytest.raises(DataError, match="no data rows"):
            load_price_csv(write_csv(tmp_path / "a.csv", ["timestamp,close"]))

    def test_blank_lines_skipped(self, tmp_path):
        lines = price_lines()
        lines.insert(10, "")
        series = load_price_csv(write_csv(tmp_path / "a.csv", lines))
        assert len(series) == 40


class TestDumpFrame:
    def test_dump_columns_and_split_labels(self, tmp_path):
        frame = small_frame(14)
        ds = fit_transform_scalers(frame)
        path = tmp_path / "frame.csv"
        dump_frame(frame, ds.split_index, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,realized_vol,garch_vol,target,split"
        assert len(lines) == len(frame) + 1
        boundary = ds.split_index + 4
        for i, line in enumerate(lines[1:]):
            fields = line.split(",")
            assert int(fields[0]) == 5 + i
            assert float(fields[1]) == frame.realized_vol[i]
            assert fields[4] == ("train" if i < boundary else "test")
