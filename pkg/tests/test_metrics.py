from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from buildcast.metrics import (
    EvaluationError,
    MetricError,
    MetricReport,
    RollingEvalConfig,
    ScalingFactors,
    aggregate,
    markdown_table,
    mase,
    msis,
    quantile_loss,
    rmsse,
    rolling_evaluate,
    rolling_origins,
    scaling_factors,
    wql,
)
from buildcast.model import ForecastDistribution


# -- hand-derived toy values --


def test_scaling_factors_toy():
    z = scaling_factors(np.array([1.0, 3.0, 2.0, 5.0]), C_ref=2)
    assert z.zeta_mae == pytest.approx(1.5, abs=1e-15)
    assert z.zeta_rmse == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert z.zeta_ql == pytest.approx(3.5, abs=1e-15)
    assert z.C_ref == 2


def test_scaling_factors_match_loop_oracle():
    y = np.random.default_rng(3).normal(5, 2, 500)
    z = scaling_factors(y, 96)
    assert (z.zeta_mae, z.zeta_rmse, z.zeta_ql) == pytest.approx(oracles.zetas(list(y), 96), rel=1e-13)


@pytest.mark.parametrize("series", [np.tile([1.0, 2.0], 10), np.full(10, 7.0)])
def test_periodic_series_rejected(series):
    with pytest.raises(MetricError, match="periodic"):
        scaling_factors(series, 2)


def test_series_shorter_than_lag_rejected():
    with pytest.raises(MetricError):
        scaling_factors(np.arange(96.0), 96)


def test_mase_rmsse_toy():
    assert mase([2, 4], [3, 5], 1.5) == pytest.approx(2 / 3, abs=1e-15)
    assert round(float(mase([2, 4], [3, 5], 1.5)), 4) == 0.6667
    assert round(float(rmsse([2, 4], [3, 5], math.sqrt(2.5))), 4) == 0.6325


def test_quantile_losses_toy():
    q = {0.1: 3.0, 0.5: 4.0, 0.9: 6.0}
    losses = {b: float(quantile_loss([v], [4.0], b, 3.5)) for b, v in q.items()}
    assert round(losses[0.1], 4) == 0.0571
    assert losses[0.5] == 0.0
    assert round(losses[0.9], 4) == 0.1143
    w = wql(np.array([[3.0], [4.0], [6.0]]), [4.0], 3.5)
    assert round(float(w), 4) == 0.0571
    assert w == pytest.approx(0.2 / 3.5, rel=1e-14)


def test_msis_toy():
    assert msis([0.0], [2.0], [3.0], 0.1, 1.5) == pytest.approx(22 / 1.5, rel=1e-14)
    assert round(float(msis([0.0], [2.0], [3.0], 0.1, 1.5)), 3) == 14.667


def test_perfect_forecasts_score_zero():
    y = np.array([1.0, 2.5, 3.0])
    assert mase(y, y, 1.0) == 0 and rmsse(y, y, 1.0) == 0
    assert wql(np.stack([y, y, y]), y, 2.0) == 0
    assert msis(y, y, y, 0.1, 1.0) == 0


def test_inside_interval_is_width_only():
    lo, up, y = np.array([0.0, 1.0]), np.array([2.0, 4.0]), np.array([1.0, 2.0])
    assert msis(lo, up, y, 0.1, 2.0) == pytest.approx(np.mean(up - lo) / 2.0)


def test_errors():
    with pytest.raises(MetricError, match="shape"):
        mase([1, 2], [1, 2, 3], 1.0)
    with pytest.raises(MetricError, match="crossed"):
        msis([2.0], [1.0], [1.5], 0.1, 1.0)
    with pytest.raises(MetricError):
        msis([0.0], [1.0], [0.5], 0.6, 1.0)
    with pytest.raises(MetricError):
        ScalingFactors(0.0, 1.0, 1.0)


# -- properties --

finite = st.floats(-1e3, 1e3, allow_nan=False)


@st.composite
def instance(draw):
    H = draw(st.integers(1, 30))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    truth = rng.normal(draw(finite), draw(st.floats(0.01, 100)), H)
    q = np.sort(rng.normal(truth, 1.0, (3, H)), axis=0)
    return truth, q


@settings(max_examples=100, deadline=None)
@given(instance(), st.floats(0.01, 1e3))
def test_metrics_match_oracle(inst, zeta):
    truth, q = inst
    betas = (0.1, 0.5, 0.9)
    assert mase(q[1], truth, zeta) == pytest.approx(oracles.mase(q[1], truth, zeta), rel=1e-12, abs=1e-12)
    assert rmsse(q[1], truth, zeta) == pytest.approx(oracles.rmsse(q[1], truth, zeta), rel=1e-12, abs=1e-12)
    assert wql(q, truth, zeta) == pytest.approx(oracles.wql(q, truth, betas, zeta), rel=1e-12, abs=1e-12)
    assert msis(q[0], q[2], truth, 0.1, zeta) == pytest.approx(
        oracles.msis(q[0], q[2], truth, 0.1, zeta), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(instance(), st.floats(1e-3, 1e3))
def test_scale_covariance(inst, c):
    truth, q = inst
    train = np.random.default_rng(0).normal(3, 1, 300)
    z, zc = scaling_factors(train, 96), scaling_factors(c * train, 96)
    pairs = [
        (mase(q[1], truth, z.zeta_mae), mase(c * q[1], c * truth, zc.zeta_mae)),
        (rmsse(q[1], truth, z.zeta_rmse), rmsse(c * q[1], c * truth, zc.zeta_rmse)),
        (wql(q, truth, z.zeta_ql), wql(c * q, c * truth, zc.zeta_ql)),
        (msis(q[0], q[2], truth, 0.1, z.zeta_mae), msis(c * q[0], c * q[2], c * truth, 0.1, zc.zeta_mae)),
    ]
    for a, b in pairs:
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(instance(), st.floats(0.01, 10))
def test_median_loss_is_scaled_mae(inst, zeta):
    truth, q = inst
    assert quantile_loss(q[1], truth, 0.5, zeta) == pytest.approx(np.mean(np.abs(q[1] - truth)) / zeta, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20), st.floats(0, 50))
def test_pinball_symmetric_at_median(truth, d):
    truth = np.array(truth)
    assert quantile_loss(truth + d, truth, 0.5, 1.0) == pytest.approx(quantile_loss(truth - d, truth, 0.5, 1.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.floats(0, 10), st.floats(0, 10), st.integers(0, 1000))
def test_msis_monotone_in_width(H, w1, extra, seed):
    y = np.random.default_rng(seed).normal(0, 1, H)
    narrow = msis(y - w1, y + w1, y, 0.1, 1.0)
    wide = msis(y - w1 - extra, y + w1 + extra, y, 0.1, 1.0)
    assert wide >= narrow


# -- rolling evaluation --


class Oracle:
    """Returns the truth exactly (needs the full series)."""

    def __init__(self, y, C):
        self.y, self.C = y, C

    def forecast(self, contexts, H, seed=0, keys=None):
        paths = np.stack([self.y[k:k + H] for k in keys])
        return ForecastDistribution(np.repeat(paths[:, None], 3, axis=1))


class Boom:
    def __init__(self, bad):
        self.bad = bad

    def forecast(self, contexts, H, seed=0, keys=None):
        if self.bad in keys:
            raise RuntimeError("boom")
        return ForecastDistribution(np.ones((len(keys), 2, H)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 50), st.integers(1, 40), st.integers(1, 4))
def test_rolling_window_count(H, extra, C, stride):
    T_test = H + extra
    y = np.random.default_rng(0).normal(5, 1, 200 + T_test)
    train, test = y[:200], y[200:]
    cfg = RollingEvalConfig(T_test=T_test, H=H, C=C, stride=stride, C_ref=24, batch_size=7)
    rep = rolling_evaluate(Oracle(y, C), test, train, cfg)
    assert rep.n_windows == (T_test - H) // stride + 1 == cfg.n_windows
    if stride == 1:
        assert rep.n_windows == T_test - H + 1
    assert rep.origins[0] == 200 and rep.origins[-1] <= 200 + T_test - H
    assert all(np.allclose(v, 0, atol=1e-12) for v in rep.scores.values())


def test_3840_step_test_span_window_count():
    cfg = RollingEvalConfig(T_test=3840, H=24)
    assert cfg.n_windows == 3817
    assert rolling_origins(1000, cfg).size == 3817


def test_single_window_when_test_equals_horizon():
    y = np.random.default_rng(1).normal(5, 1, 300)
    rep = rolling_evaluate(Oracle(y, 96), y[276:], y[:276], RollingEvalConfig(T_test=24))
    assert rep.n_windows == 1


def test_failure_names_origin():
    y = np.random.default_rng(1).normal(5, 1, 400)
    with pytest.raises(EvaluationError) as info:
        rolling_evaluate(Boom(250), y[200:], y[:200], RollingEvalConfig(T_test=100, batch_size=32))
    assert info.value.origin == 250


def test_rolling_scores_match_oracle():
    rng = np.random.default_rng(5)
    y = rng.normal(10, 2, 400)
    train, test = y[:300], y[300:]

    class Noisy:
        def forecast(self, contexts, H, seed=0, keys=None):
            r = np.random.default_rng(seed)
            return ForecastDistribution(contexts[:, None, -H:] + r.normal(0, 1, (len(keys), 11, H)))

    cfg = RollingEvalConfig(T_test=60, H=12, C=48, batch_size=1000)
    rep = rolling_evaluate(Noisy(), test, train, cfg)
    za, zr, zq = oracles.zetas(list(train), 96)
    dist = Noisy().forecast(np.stack([y[o - 48:o] for o in rep.origins]), 12, 0, rep.origins)
    for i, o in enumerate(rep.origins):
        truth = y[o:o + 12]
        s = dist.samples[i]
        q = [np.quantile(s, b, axis=0) for b in (0.1, 0.5, 0.9)]
        assert rep.scores["mase"][i] == pytest.approx(oracles.mase(s.mean(0), truth, za), rel=1e-12)
        assert rep.scores["rmsse"][i] == pytest.approx(oracles.rmsse(s.mean(0), truth, zr), rel=1e-12)
        assert rep.scores["wql"][i] == pytest.approx(oracles.wql(q, truth, (0.1, 0.5, 0.9), zq), rel=1e-12)
        assert rep.scores["msis"][i] == pytest.approx(oracles.msis(q[0], q[2], truth, 0.1, za), rel=1e-12)


def test_rolling_context_reaches_into_train():
    y = np.arange(1.0, 401.0)
    seen = []

    class Spy:
        def forecast(self, contexts, H, seed=0, keys=None):
            seen.append(contexts.copy())
            return ForecastDistribution(np.ones((len(keys), 2, H)))

    rolling_evaluate(Spy(), y[300:], y[:300] + np.sin(np.arange(300)), RollingEvalConfig(T_test=24, C=96))
    assert seen[0][0, -1] == pytest.approx(300 + np.sin(299))


def test_config_validation():
    with pytest.raises(MetricError):
        RollingEvalConfig(T_test=10, H=24)
    with pytest.raises(MetricError):
        RollingEvalConfig(T_test=100, quantiles=(0.0, 0.5))
    with pytest.raises(MetricError):
        RollingEvalConfig(T_test=100, msis_beta=0.5)


# -- reports and aggregation --


def _report(name, mase_values):
    n = len(mase_values)
    return MetricReport(name, np.arange(n), {"mase": mase_values, "rmsse": np.ones(n), "wql": np.ones(n),
                                             "msis": np.ones(n)})


def test_aggregate_arithmetic():
    agg = aggregate([_report("a", [0.2]), _report("b", [0.4])])
    assert agg["mean"]["mase"] == pytest.approx(0.3)
    assert agg["std"]["mase"] == pytest.approx(0.1)
    single = aggregate([_report("a", [0.2, 0.5])])
    assert all(v == 0 for v in single["std"].values())


def test_aggregate_matches_manual_recomputation():
    rng = np.random.default_rng(0)
    reports = [_report(f"s{i}", rng.random(7)) for i in range(32)]
    means = [float(np.mean(r.scores["mase"])) for r in reports]
    mu = sum(means) / 32
    sd = math.sqrt(sum((m - mu) ** 2 for m in means) / 32)
    agg = aggregate(reports)
    assert agg["mean"]["mase"] == pytest.approx(mu, rel=1e-13)
    assert agg["std"]["mase"] == pytest.approx(sd, rel=1e-12)
    assert "± " in markdown_table({"model": agg})


def test_aggregate_empty_rejected():
    with pytest.raises(MetricError):
        aggregate([])


def test_report_roundtrips():
    rep = _report("z0-winter-Occ", np.random.default_rng(0).random(5))
    again = MetricReport.from_json(rep.to_json())
    assert np.array_equal(again.scores["mase"], rep.scores["mase"])
    from_csv = MetricReport.from_csv(rep.to_csv())
    assert np.array_equal(from_csv.scores["mase"], rep.scores["mase"])
    assert np.array_equal(from_csv.origins, rep.origins)


def test_report_rejects_negative_scores():
    with pytest.raises(MetricError):
        _report("x", [-0.1])
