"""Walk through one synthetic building series and score a seasonal-naive forecast.

Run with ``python3 demos/synthetic_and_metrics.py``. Takes a few seconds.
"""

from __future__ import annotations

import numpy as np

from buildcast.baselines import fit_seasonal_naive
from buildcast.metrics import RollingEvalConfig, rolling_evaluate, scaling_factors
from buildcast.series import Channel, Season, make_windows, preprocess, split_train_test
from buildcast.synth import SynthConfig, SynthOracle, generate_series
from buildcast.tokenizer import TokenizerSpec, detokenize, mean_scale, tokenize


def main() -> None:
    cfg = SynthConfig(seed=0)
    raw = generate_series(cfg, 3, Season.WINTER, Channel.OCC)
    series = preprocess(raw)
    print(f"zone 3 winter occupancy: {len(raw)} raw steps, {len(series)} after keeping workdays")

    # one day of the profile next to the noisy series
    day = slice(96 * 2, 96 * 3)
    profile = SynthOracle(cfg).profile(3, Season.WINTER, Channel.OCC).values
    print("hourly profile  :", np.round(profile[day][::4], 2))
    print("hourly observed :", np.round(series.values[day][::4], 2))

    # tokenizer roundtrip on a context window
    spec = TokenizerSpec()
    ctx = series.values[:96]
    scaled, scale = mean_scale(ctx, spec)
    tokens = tokenize(scaled, spec, scale)
    back = detokenize(tokens, spec)
    print(f"tokenizer: scale {float(scale):.3f}, max roundtrip error {np.max(np.abs(back - ctx)):.4f} "
          f"(half a bin is {spec.bin_width / 2 * float(scale):.4f})")

    train, test = split_train_test(series, 480)
    pairs = make_windows(train, 96, 24)
    z = scaling_factors(train)
    print(f"{len(pairs)} training pairs; scale factors MAE {z.zeta_mae:.4f}, RMSE {z.zeta_rmse:.4f}, QL {z.zeta_ql:.4f}")

    naive = fit_seasonal_naive(train, H=24, lag=96)
    report = rolling_evaluate(naive, test, train, RollingEvalConfig(T_test=480, C=96))
    print(f"seasonal naive over {report.n_windows} rolling windows:")
    for k, v in report.mean.items():
        print(f"  {k:6s} {v:.3f}")


if __name__ == "__main__":
    main()
