"""Scaled point and probabilistic forecast metrics and rolling backtests.

All scores are normalised by constants computed once from the training
split, so they are comparable across buildings of very different size:

* ``zeta_mae`` / ``zeta_rmse``: error of the lag-``C_ref`` naive forecast
  over the training split,
* ``zeta_ql``: mean absolute training value over the same index range.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .series import TimeSeries

DEFAULT_QUANTILES = (0.1, 0.5, 0.9)
METRICS = ("mase", "rmsse", "wql", "msis")


class MetricError(ValueError):
    pass


class EvaluationError(RuntimeError):
    """A forecaster failed; ``origin`` is the offending forecast origin."""

    def __init__(self, origin: int, cause: str):
        super().__init__(f"forecast failed at origin {origin}: {cause}")
        self.origin = origin


@dataclass(frozen=True)
class ScalingFactors:
    zeta_mae: float
    zeta_rmse: float
    zeta_ql: float
    C_ref: int = 96

    def __post_init__(self) -> None:
        for name in ("zeta_mae", "zeta_rmse", "zeta_ql"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise MetricError(f"{name} must be positive and finite, got {v}")

    def scaled(self, c: float) -> ScalingFactors:
        return ScalingFactors(self.zeta_mae * c, self.zeta_rmse * c, self.zeta_ql * c, self.C_ref)


def _values(series) -> np.ndarray:
    return np.asarray(series.values if isinstance(series, TimeSeries) else series, dtype=np.float64)


def scaling_factors(train, C_ref: int = 96) -> ScalingFactors:
    """Naive-forecast scales from a training series (or plain array).

    Raises:
        MetricError: if the series is not longer than ``C_ref`` or is
            exactly ``C_ref``-periodic (zero naive error).
    """
    y = _values(train)
    if C_ref < 1:
        raise MetricError("C_ref must be >= 1")
    if y.size <= C_ref:
        raise MetricError(f"training series of length {y.size} is not longer than C_ref={C_ref}")
    d = y[C_ref:] - y[:-C_ref]
    zeta_mae = float(np.mean(np.abs(d)))
    if zeta_mae == 0.0:
        raise MetricError("training series is exactly periodic at lag C_ref; scaled metrics are undefined")
    return ScalingFactors(zeta_mae, float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(y[C_ref:]))), C_ref)


def _paths(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] == 0:
        raise MetricError("empty horizon")
    return a, b


def mase(mean_path, truth, zeta_mae: float) -> float | np.ndarray:
    """Mean absolute error over the horizon divided by ``zeta_mae``.

    Leading axes are treated as separate windows.
    """
    p, y = _paths(mean_path, truth)
    return np.mean(np.abs(p - y), axis=-1) / zeta_mae


def rmsse(mean_path, truth, zeta_rmse: float) -> float | np.ndarray:
    p, y = _paths(mean_path, truth)
    return np.sqrt(np.mean((p - y) ** 2, axis=-1)) / zeta_rmse


def pinball(pred, truth, beta: float) -> np.ndarray:
    diff = np.asarray(truth, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    return np.maximum(beta * diff, (beta - 1.0) * diff)


def quantile_loss(pred, truth, beta: float, zeta_ql: float) -> float | np.ndarray:
    """Scaled pinball loss ``2 / (H zeta_ql) * sum pinball``."""
    p, y = _paths(pred, truth)
    return 2.0 * np.mean(pinball(p, y, beta), axis=-1) / zeta_ql


def wql(quantile_paths, truth, zeta_ql: float, quantiles: Sequence[float] = DEFAULT_QUANTILES):
    """Average scaled quantile loss.

    Args:
        quantile_paths: a forecast object with a ``quantile(beta)`` method,
            or an array with the quantile levels on axis ``-2``.
        truth: realised values, shape ``(..., H)``.
    """
    y = np.asarray(truth, dtype=np.float64)
    if hasattr(quantile_paths, "quantile"):
        preds = [quantile_paths.quantile(b) for b in quantiles]
    else:
        q = np.asarray(quantile_paths, dtype=np.float64)
        if q.shape[-2] != len(quantiles):
            raise MetricError("quantile axis does not match the quantile levels")
        preds = [q[..., i, :] for i in range(len(quantiles))]
    return sum(quantile_loss(p, y, b, zeta_ql) for p, b in zip(preds, quantiles)) / len(quantiles)


def msis(lower, upper, truth, beta: float, zeta_mae: float) -> float | np.ndarray:
    """Scaled interval score of the ``[q_beta, q_(1-beta)]`` interval."""
    if not 0.0 < beta < 0.5:
        raise MetricError("beta must lie in (0, 0.5)")
    lo, up = _paths(lower, upper)
    lo, y = _paths(lo, truth)
    if np.any(lo > up):
        raise MetricError("interval is crossed (lower > upper)")
    score = (up - lo) + (2.0 / beta) * np.maximum(lo - y, 0.0) + (2.0 / beta) * np.maximum(y - up, 0.0)
    return np.mean(score, axis=-1) / zeta_mae


# -- rolling evaluation --


class Forecaster(Protocol):
    def forecast(self, contexts: np.ndarray, H: int, seed: int = 0, keys=None): ...


@dataclass(frozen=True)
class RollingEvalConfig:
    T_test: int
    H: int = 24
    C: int = 96
    stride: int = 1
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    msis_beta: float = 0.1
    S: int = 20
    C_ref: int = 96
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self) -> None:
        if self.H < 1 or self.C < 1 or self.stride < 1:
            raise MetricError("H, C and stride must be >= 1")
        if self.T_test < self.H:
            raise MetricError("T_test must be >= H")
        if not all(0.0 < q < 1.0 for q in self.quantiles):
            raise MetricError("quantile levels must lie in (0, 1)")
        if not 0.0 < self.msis_beta < 0.5:
            raise MetricError("msis_beta must lie in (0, 0.5)")

    @property
    def n_windows(self) -> int:
        return (self.T_test - self.H) // self.stride + 1

    def to_dict(self) -> dict:
        return {"T_test": self.T_test, "H": self.H, "C": self.C, "stride": self.stride,
                "quantiles": list(self.quantiles), "msis_beta": self.msis_beta, "S": self.S,
                "C_ref": self.C_ref, "seed": self.seed}


@dataclass
class MetricReport:
    """Per-window scores of one series plus their averages."""

    series: str
    origins: np.ndarray
    scores: dict[str, np.ndarray]
    scaling: ScalingFactors | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.origins = np.asarray(self.origins, dtype=np.int64)
        self.scores = {m: np.asarray(self.scores[m], dtype=np.float64) for m in METRICS}
        for m, v in self.scores.items():
            if v.shape != self.origins.shape:
                raise MetricError(f"{m} has {v.size} scores for {self.origins.size} windows")
            if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
                raise MetricError(f"{m} scores must be finite and non-negative")

    @property
    def n_windows(self) -> int:
        return int(self.origins.size)

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean(v)) for m, v in self.scores.items()}

    @property
    def std(self) -> dict[str, float]:
        return {m: float(np.std(v)) for m, v in self.scores.items()}

    def to_dict(self) -> dict:
        return {
            "series": self.series,
            "n_windows": self.n_windows,
            "mean": self.mean,
            "std": self.std,
            "scaling": None if self.scaling is None else {
                "zeta_mae": self.scaling.zeta_mae, "zeta_rmse": self.scaling.zeta_rmse,
                "zeta_ql": self.scaling.zeta_ql, "C_ref": self.scaling.C_ref},
            "config": self.config,
            "origins": self.origins.tolist(),
            "scores": {m: v.tolist() for m, v in self.scores.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        sc = d.get("scaling")
        return cls(d["series"], np.asarray(d["origins"]), {m: np.asarray(v) for m, v in d["scores"].items()},
                   None if sc is None else ScalingFactors(**sc), d.get("config", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> list[dict]:
        return [{"series": self.series, "origin": int(o), **{m: repr(float(self.scores[m][i])) for m in METRICS}}
                for i, o in enumerate(self.origins)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["series", "origin", *METRICS], lineterminator="\n")
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricReport:
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise MetricError("CSV has no windows")
        return cls(rows[0]["series"], np.array([int(r["origin"]) for r in rows]),
                   {m: np.array([float(r[m]) for r in rows]) for m in METRICS})


def rolling_origins(T: int, cfg: RollingEvalConfig) -> np.ndarray:
    """Forecast origins ``T, T+stride, ..., <= T + T_test - H`` (0-based)."""
    return np.arange(T, T + cfg.T_test - cfg.H + 1, cfg.stride)


def _forecast_chunk(forecaster, ctx, H, seed, origins):
    try:
        dist = forecaster.forecast(ctx, H, seed=seed, keys=origins)
        if not (np.all(np.isfinite(dist.mean())) and all(np.all(np.isfinite(dist.quantile(q))) for q in (0.1, 0.9))):
            raise FloatingPointError("non-finite forecast")
        return dist
    except Exception as exc:
        if len(origins) == 1:
            raise EvaluationError(int(origins[0]), f"{type(exc).__name__}: {exc}") from exc
        for i in range(len(origins)):  # locate the first failing origin
            _forecast_chunk(forecaster, ctx[i:i + 1], H, seed, origins[i:i + 1])
        raise EvaluationError(int(origins[0]), f"{type(exc).__name__}: {exc}") from exc


def rolling_evaluate(forecaster: Forecaster, test, train, cfg: RollingEvalConfig,
                     scaling: ScalingFactors | None = None, name: str | None = None) -> MetricReport:
    """Score forecasts launched from every origin of the test span.

    The history is ``train`` followed by ``test``; origin ``t`` uses the
    ``C`` values before it as context (reaching back into the training
    split for early origins) and is scored on ``H`` values from ``t``.
    Every origin is forecast with its own random stream keyed by ``t``.
    """
    y_tr, y_te = _values(train), _values(test)
    if y_te.size < cfg.T_test:
        raise MetricError(f"test series has {y_te.size} steps, need T_test={cfg.T_test}")
    T = y_tr.size
    if T < cfg.C:
        raise MetricError(f"need at least C={cfg.C} training steps for the first context, got {T}")
    scaling = scaling or scaling_factors(y_tr, cfg.C_ref)
    y = np.concatenate([y_tr, y_te[:cfg.T_test]])
    origins = rolling_origins(T, cfg)
    idx_c = origins[:, None] + np.arange(-cfg.C, 0)
    idx_h = origins[:, None] + np.arange(cfg.H)
    scores = {m: np.empty(origins.size) for m in METRICS}
    lo_q, hi_q = cfg.msis_beta, 1 - cfg.msis_beta
    for a in range(0, origins.size, cfg.batch_size):
        sl = slice(a, a + cfg.batch_size)
        dist = _forecast_chunk(forecaster, y[idx_c[sl]], cfg.H, cfg.seed, origins[sl])
        truth = y[idx_h[sl]]
        scores["mase"][sl] = mase(dist.mean(), truth, scaling.zeta_mae)
        scores["rmsse"][sl] = rmsse(dist.mean(), truth, scaling.zeta_rmse)
        scores["wql"][sl] = wql(dist, truth, scaling.zeta_ql, cfg.quantiles)
        scores["msis"][sl] = msis(dist.quantile(lo_q), dist.quantile(hi_q), truth, cfg.msis_beta,
                                  scaling.zeta_mae)
    label = name or (test.id.key if isinstance(test, TimeSeries) else "series")
    return MetricReport(label, origins, scores, scaling, cfg.to_dict())


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Unweighted mean and population std of per-report averages."""
    if not reports:
        raise MetricError("nothing to aggregate")
    means = np.array([[r.mean[m] for m in METRICS] for r in reports])
    return {
        "n_series": len(reports),
        "n_windows": int(sum(r.n_windows for r in reports)),
        "mean": {m: float(v) for m, v in zip(METRICS, means.mean(axis=0))},
        "std": {m: float(v) for m, v in zip(METRICS, means.std(axis=0))},
    }


def markdown_table(rows: dict[str, dict], metrics: Sequence[str] = METRICS, digits: int = 3) -> str:
    """Render ``{label: aggregate(...)}`` as a ``mean ± std`` markdown table."""
    head = "| model | " + " | ".join(m.upper() for m in metrics) + " |"
    sep = "|---" * (len(metrics) + 1) + "|"
    lines = [head, sep]
    for label, agg in rows.items():
        cells = [f"{agg['mean'][m]:.{digits}f} ± {agg['std'][m]:.{digits}f}" for m in metrics]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def save_reports(reports: Sequence[MetricReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1))


def load_reports(path: str | Path) -> list[MetricReport]:
    return [MetricReport.from_dict(d) for d in json.loads(Path(path).read_text())]
