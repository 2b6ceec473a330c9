from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildcast.baselines import (
    BaselineError,
    QuantileForecast,
    QuantileRegressorModel,
    SeasonalNaiveModel,
    fit_seasonal_naive,
    seasonal_naive_forecast,
    seasonal_naive_path,
    train_quantile_regressor,
)
from buildcast.checkpoint import Checkpoint, CheckpointError
from buildcast.metrics import RollingEvalConfig, rolling_evaluate
from buildcast.series import Channel, Season, SeriesId, TimeSeries, make_windows
from buildcast.training import TrainRun

from oracles import seasonal_naive_point

SID = SeriesId(0, Season.WINTER, Channel.OCC)


def series(values):
    return TimeSeries(SID, datetime(2024, 1, 1), np.asarray(values, dtype=float), timedelta(minutes=15))


def sine(n, period=24, noise=0.0, seed=0):
    t = np.arange(n)
    return 2.0 + np.sin(2 * np.pi * t / period) + np.random.default_rng(seed).normal(0, noise, n)


# -- seasonal naive --


def test_naive_path_is_lagged_input():
    h = np.arange(200.0)
    path = seasonal_naive_path(h, 24, lag=96)
    assert np.array_equal(path, h[-96:-72])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 70), st.integers(0, 20), st.integers(0, 1000))
def test_naive_path_matches_oracle(lag, H, extra, seed):
    h = np.random.default_rng(seed).normal(size=lag + extra)
    assert seasonal_naive_path(h, H, lag).tolist() == seasonal_naive_point(h.tolist(), H, lag)


def test_naive_path_needs_a_full_period():
    with pytest.raises(BaselineError):
        seasonal_naive_path(np.ones(5), 3, lag=6)


def test_noiseless_periodic_gives_degenerate_distribution():
    y = sine(24 * 20)
    model = fit_seasonal_naive(y, H=6, lag=24, n_samples=10)
    assert np.allclose(model.residuals, 0.0, atol=1e-12)
    dist = model.forecast(y[None], 6)
    assert np.allclose(dist.samples, seasonal_naive_path(y, 6, 24), atol=1e-12)


def test_naive_residual_spread():
    y = sine(24 * 400, noise=0.1, seed=1)
    model = fit_seasonal_naive(y, H=4, lag=24)
    # difference of two independent noise draws
    assert np.allclose(model.residuals.std(axis=1), 0.1 * np.sqrt(2), rtol=0.05)
    assert np.all(np.diff(model.quantile_table, axis=0) >= 0)


def test_naive_forecast_keys_make_rows_independent():
    y = sine(24 * 30, noise=0.1)
    model = fit_seasonal_naive(y, H=5, lag=24, n_samples=8)
    ctx = np.stack([y[:300], y[100:400]])
    both = model.forecast(ctx, 5, seed=2, keys=[7, 8]).samples
    alone = seasonal_naive_forecast(y[100:400], 5, 24, model, seed=2, key=8).samples
    assert np.array_equal(both[1], alone)
    with pytest.raises(BaselineError):
        model.forecast(ctx, 6)
    with pytest.raises(BaselineError):
        seasonal_naive_forecast(y, 5, 12, model)


def test_naive_fit_rejects_short_training():
    with pytest.raises(BaselineError, match="too short"):
        fit_seasonal_naive(np.ones(24), H=4, lag=24)


def test_naive_checkpoint_roundtrip():
    model = fit_seasonal_naive(sine(300, noise=0.1), H=4, lag=24, n_samples=9)
    back = SeasonalNaiveModel.from_checkpoint(Checkpoint.from_bytes(model.to_checkpoint().to_bytes()))
    assert back.lag == 24 and back.n_samples == 9 and np.array_equal(back.residuals, model.residuals)
    with pytest.raises(CheckpointError):
        QuantileRegressorModel.from_checkpoint(model.to_checkpoint())


# -- quantile forecast container --


def test_quantile_forecast_interpolates_and_clamps():
    qf = QuantileForecast((0.1, 0.5, 0.9), np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]))
    assert qf.quantile(0.5).tolist() == [1.0, 2.0]
    assert np.allclose(qf.quantile(0.3), [0.5, 1.0], rtol=0, atol=1e-15)
    assert qf.quantile(0.05).tolist() == [0.0, 0.0] and qf.quantile(0.95).tolist() == [3.0, 4.0]
    assert qf.mean().tolist() == [1.0, 2.0] and qf.horizon == 2
    with pytest.raises(BaselineError):
        QuantileForecast((0.9, 0.1), np.zeros((2, 3)))


# -- quantile regression --


@pytest.fixture(scope="module")
def qr_sine():
    ds = make_windows(series(sine(24 * 60, noise=0.05, seed=3)), 48, 6)
    return train_quantile_regressor(ds, run=TrainRun(mode="Pretrain", iterations=600, batch_size=32)), ds


def test_qr_recovers_constant_series():
    ds = make_windows(series(np.full(200, 3.0)), 16, 4)
    run = TrainRun(mode="Pretrain", iterations=1000, batch_size=16, lr=1e-4)
    model = train_quantile_regressor(ds, (0.1, 0.5, 0.9), run)
    # pinball gradients do not vanish at the optimum, so the lr bounds the final jitter
    assert np.max(np.abs(model.predict(np.full(16, 3.0)) - 3.0)) < 1e-2


def test_qr_median_tracks_signal(qr_sine):
    model, _ = qr_sine
    y = sine(24 * 10)
    clean = sine(24 * 10 + 6)[-6:]
    med = model.forecast(y[None, -48:], 6).quantile(0.5)[0]
    assert np.max(np.abs(med - clean)) < 0.15


def test_qr_quantiles_monotone_and_ordered_interval(qr_sine):
    model, ds = qr_sine
    q = model.predict(ds.contexts[:50])
    assert np.all(np.diff(q, axis=1) >= 0)
    assert np.mean(q[:, -1] - q[:, 0]) > 0


def test_qr_validation_and_roundtrip(qr_sine):
    model, _ = qr_sine
    with pytest.raises(BaselineError):
        model.forecast(np.ones((1, 48)), 5)
    with pytest.raises(BaselineError):
        model.predict(np.ones(10))
    back = QuantileRegressorModel.from_checkpoint(Checkpoint.from_bytes(model.to_checkpoint().to_bytes()))
    x = np.abs(np.random.default_rng(0).normal(2, 1, (3, 48)))
    assert np.array_equal(back.predict(x), model.predict(x))


def test_qr_is_seeded():
    ds = make_windows(series(sine(200, noise=0.1)), 16, 4)
    a = train_quantile_regressor(ds, run=TrainRun(mode="Pretrain", iterations=20, batch_size=8, seed=1))
    b = train_quantile_regressor(ds, run=TrainRun(mode="Pretrain", iterations=20, batch_size=8, seed=1))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


# -- interface conformance --


@pytest.mark.parametrize("kind", ["naive", "qr"])
def test_baselines_run_through_rolling_evaluation(kind, qr_sine):
    y = sine(24 * 30, noise=0.05, seed=4)
    train, test = series(y[:600]), series(y[600:])
    model = fit_seasonal_naive(train, H=6, lag=24, n_samples=20) if kind == "naive" else qr_sine[0]
    cfg = RollingEvalConfig(T_test=len(test), H=6, C=48, C_ref=24)
    report = rolling_evaluate(model, test, train, cfg)
    assert len(report.origins) == len(test) - 6 + 1
    assert set(report.scores) == {"mase", "rmsse", "wql", "msis"}
    # naive sits near 1 by construction of the MAE scale; the regressor should beat it
    assert report.mean["mase"] < (1.3 if kind == "naive" else 1.0)
