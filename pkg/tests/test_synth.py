from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildcast.series import Channel, Season, filter_workdays, read_csv, read_manifest
from buildcast.synth import (
    SynthConfig,
    SynthOracle,
    channel_noise_std,
    deterministic_series,
    generate_corpus,
    generate_series,
    true_quantiles,
    write_corpus,
)

SMALL = SynthConfig(n_zones=2, days=21)


def test_corpus_count_and_order():
    corpus = generate_corpus(SynthConfig(days=7))
    assert len(corpus) == 32
    keys = [(s.id.zone, s.id.season) for s in corpus]
    assert keys == [(z, s) for z in range(8) for s in Season]


def test_same_seed_bit_identical():
    a = generate_corpus(SMALL)
    b = generate_corpus(SMALL)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    c = generate_corpus(replace(SMALL, seed=1))
    assert not np.array_equal(a[0].values, c[0].values)


def test_series_independent_of_generation_order():
    direct = generate_series(SMALL, 1, Season.SUMMER, Channel.OCC)
    from_corpus = [s for s in generate_corpus(SMALL) if s.id.zone == 1 and s.id.season is Season.SUMMER][0]
    assert np.array_equal(direct.values, from_corpus.values)


def test_noiseless_days_repeat_within_weekday_class():
    cfg = replace(SMALL, noise_std=0.0)
    s = generate_series(cfg, 0, Season.WINTER, Channel.OCC)
    days = s.values.reshape(-1, 96)
    assert np.array_equal(days[0], days[7]) and np.array_equal(days[1], days[15])
    # same weekday one week apart: correlation at that lag is exactly one
    a, b = days[0], days[7]
    assert np.corrcoef(a, b)[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_weekly_modulation_changes_weekday_levels():
    s = filter_workdays(generate_series(replace(SMALL, noise_std=0.0), 0, Season.WINTER, Channel.OCC))
    peaks = s.values.reshape(-1, 96).max(axis=1)[:5]
    assert len(set(np.round(peaks, 9))) > 1


@pytest.mark.parametrize("channel", list(Channel))
def test_occupancy_like_values_non_negative(channel):
    s = generate_series(replace(SMALL, noise_std=0.3), 0, Season.SUMMER, channel)
    assert np.all(s.values >= 0)


def test_occupancy_zero_at_night_without_noise():
    s = deterministic_series(SMALL, 0, Season.WINTER, Channel.OCC)
    night = s.values.reshape(-1, 96)[:, :20]  # 00:00-05:00
    assert np.all(night == 0)


def test_oracle_noiseless_quantiles_equal_profile():
    cfg = replace(SMALL, noise_std=0.0)
    prof = SynthOracle(cfg).profile(0, Season.WINTER, Channel.OCC).values
    q = true_quantiles(SynthOracle(cfg), 0, Season.WINTER, Channel.OCC, 40, 24, [0.1, 0.5, 0.9])
    assert np.array_equal(q, np.tile(prof[40:64], (3, 1)))


def test_oracle_median_and_spread():
    oracle = SynthOracle(SMALL)
    prof = oracle.profile(0, Season.WINTER, Channel.OCC).values
    t = 96 + 48  # midday, far from the zero floor
    q = oracle.true_quantiles(0, Season.WINTER, Channel.OCC, t, 8, [0.1, 0.5, 0.9], n_samples=20_000)
    sigma = channel_noise_std(SMALL, Channel.OCC)
    mc = 3 * 1.2533 * sigma / np.sqrt(20_000)  # 3 standard errors of a sample median
    assert np.all(np.abs(q[1] - prof[t:t + 8]) < mc)
    gap = q[2] - q[0]
    assert np.allclose(gap, 2 * 1.2815516 * sigma, rtol=0.03)


def test_oracle_deterministic_and_validated():
    oracle = SynthOracle(SMALL)
    a = oracle.true_quantiles(1, Season.SPRING, Channel.CO2, 10, 5, [0.5], n_samples=500)
    b = oracle.true_quantiles(1, Season.SPRING, Channel.CO2, 10, 5, [0.5], n_samples=500)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        oracle.true_quantiles(1, Season.SPRING, Channel.CO2, 10, 5, [1.0])
    with pytest.raises(ValueError):
        oracle.true_quantiles(1, Season.SPRING, Channel.CO2, 10**6, 5, [0.5])


def test_write_corpus_roundtrip(tmp_path):
    cfg = replace(SMALL, n_zones=1, seasons=(Season.AUTUMN,))
    corpus = generate_corpus(cfg)
    manifest = write_corpus(corpus, tmp_path, cfg)
    [(path, sid)] = read_manifest(manifest)
    back = read_csv(path, sid)
    assert sid == corpus[0].id
    assert np.array_equal(back.values, corpus[0].values)
    assert json.loads(manifest.read_text())["synth_config"]["n_zones"] == 1


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        SynthConfig(noise_std=-1)
    with pytest.raises(ValueError):
        SynthConfig(days=0)
    cfg = SynthConfig(seasons=("winter",), channels=("CO2",))
    assert SynthConfig.from_dict(json.loads(cfg.to_json())) == cfg


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 7))
def test_any_seed_gives_finite_series(seed, zone):
    s = generate_series(SynthConfig(days=7, seed=seed), zone, Season.SPRING, Channel.OCC)
    assert len(s) == 7 * 96 and np.all(np.isfinite(s.values))
