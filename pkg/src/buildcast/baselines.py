"""Reference forecasters sharing the transformer's ``forecast`` interface.

* :class:`SeasonalNaiveModel` repeats the value one reference period back
  and adds bootstrapped training residuals to get a distribution.
* :class:`QuantileRegressorModel` is a one-hidden-layer network mapping a
  mean-scaled context straight to a grid of quantile paths.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError
from .metrics import DEFAULT_QUANTILES
from .model import ForecastDistribution
from .optim import OptimizerState, adamw_step, warmup_lr
from .series import TimeSeries, WindowedDataset
from .training import TrainingDiverged, TrainRun

logger = logging.getLogger(__name__)


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileForecast:
    """Forecast given directly as quantile paths ``(..., Q, H)``.

    Levels between the stored ones are linearly interpolated; outside
    them the nearest stored path is used. The point forecast is the
    median path (or the average over levels when 0.5 is not stored).
    """

    levels: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape[-2] != len(self.levels):
            raise BaselineError("values need one path per quantile level on axis -2")
        if list(self.levels) != sorted(self.levels):
            raise BaselineError("quantile levels must be increasing")
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[-1]

    def quantile(self, beta: float) -> np.ndarray:
        lv = np.asarray(self.levels)
        hit = np.flatnonzero(np.isclose(lv, beta, rtol=0, atol=1e-12))
        if hit.size:
            return self.values[..., hit[0], :]
        j = int(np.clip(np.searchsorted(lv, beta), 1, lv.size - 1))
        w = np.clip((beta - lv[j - 1]) / (lv[j] - lv[j - 1]), 0.0, 1.0)
        return (1 - w) * self.values[..., j - 1, :] + w * self.values[..., j, :]

    def mean(self) -> np.ndarray:
        if 0.5 in self.levels:
            return self.quantile(0.5)
        return self.values.mean(axis=-2)

    def __getitem__(self, i) -> QuantileForecast:
        return QuantileForecast(self.levels, self.values[i])


# -- seasonal naive --


def seasonal_naive_path(history, H: int, lag: int = 96) -> np.ndarray:
    """Point path ``y[t + j - lag * (1 + j // lag)]`` for ``j < H``.

    Works on the last axis, so a batch of histories gives a batch of paths.
    """
    h = np.asarray(history, dtype=np.float64)
    if lag < 1:
        raise BaselineError("lag must be >= 1")
    if h.shape[-1] < lag:
        raise BaselineError(f"history of {h.shape[-1]} steps is shorter than lag={lag}")
    j = np.arange(H)
    return h[..., h.shape[-1] - lag + (j % lag)]


@dataclass
class SeasonalNaiveModel:
    """Lag-``lag`` repetition plus a per-step residual bootstrap.

    ``residuals[j]`` holds training errors of the naive point forecast at
    horizon step ``j``; ``quantile_table[k, j]`` their ``levels[k]`` quantile.
    """

    lag: int
    residuals: np.ndarray
    levels: tuple[float, ...] = DEFAULT_QUANTILES
    n_samples: int = 100
    quantile_table: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.lag < 1:
            raise BaselineError("lag must be >= 1")
        self.residuals = np.atleast_2d(np.asarray(self.residuals, dtype=np.float64))
        self.quantile_table = np.quantile(self.residuals, self.levels, axis=1)

    @property
    def horizon(self) -> int:
        return self.residuals.shape[0]

    def forecast(self, contexts, H: int, seed: int = 0, keys=None) -> ForecastDistribution:
        if H > self.horizon:
            raise BaselineError(f"model was fitted for H <= {self.horizon}, asked for {H}")
        ctx = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        point = seasonal_naive_path(ctx, H, self.lag)
        keys = np.arange(ctx.shape[0]) if keys is None else np.asarray(keys)
        n_res = self.residuals.shape[1]
        out = np.empty((ctx.shape[0], self.n_samples, H))
        for i, k in enumerate(keys):
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, int(k), 0x5EA5])))
            pick = rng.integers(0, n_res, (self.n_samples, H))
            out[i] = point[i] + self.residuals[np.arange(H), pick]
        return ForecastDistribution(out)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint("seasonal_naive", {"lag": self.lag, "levels": list(self.levels),
                                             "n_samples": self.n_samples},
                          {"params": {"residuals": self.residuals}})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> SeasonalNaiveModel:
        if ckpt.payload_type != "seasonal_naive":
            raise CheckpointError(f"expected a seasonal_naive checkpoint, got {ckpt.payload_type}")
        m = ckpt.meta
        return cls(int(m["lag"]), ckpt.groups["params"]["residuals"], tuple(m["levels"]), int(m["n_samples"]))


def fit_seasonal_naive(train, H: int = 24, lag: int = 96, levels: Sequence[float] = DEFAULT_QUANTILES,
                       n_samples: int = 100) -> SeasonalNaiveModel:
    """Collect naive-forecast residuals per horizon step from a training split.

    Step ``j`` looks back ``lag * (1 + j // lag)`` values. All steps keep
    the same number of residuals (the most recent ones).
    """
    y = np.asarray(train.values if isinstance(train, TimeSeries) else train, dtype=np.float64)
    back = lag * (1 + np.arange(H) // lag)
    n = y.size - int(back.max())
    if n < 1:
        raise BaselineError(f"training series of {y.size} steps too short for lag={lag}, H={H}")
    res = np.stack([y[-n:] - y[y.size - n - b:y.size - b] for b in back])
    return SeasonalNaiveModel(lag, res, tuple(levels), n_samples)


def seasonal_naive_forecast(history, H: int, lag: int, model: SeasonalNaiveModel, seed: int = 0,
                            key: int = 0) -> ForecastDistribution:
    """Sample paths for a single history (see :class:`SeasonalNaiveModel`)."""
    if model.lag != lag:
        raise BaselineError(f"model lag {model.lag} != {lag}")
    return model.forecast(np.asarray(history)[None], H, seed, [key])[0]


# -- direct quantile regression --


def _mlp_np(P: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    h = np.maximum(x @ P["w1"] + P["b1"], 0.0)
    return h @ P["w2"] + P["b2"]


@dataclass
class QuantileRegressorModel:
    """``C`` mean-scaled inputs -> ``Q x H`` scaled quantiles via one ReLU layer."""

    C: int
    H: int
    levels: tuple[float, ...]
    params: dict[str, np.ndarray]
    scale_epsilon: float = 1e-6

    def _scaled(self, ctx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.maximum(np.mean(np.abs(ctx), axis=-1, keepdims=True), self.scale_epsilon)
        return ctx / s, s

    def predict(self, contexts) -> np.ndarray:
        """Sorted quantile paths ``(N, Q, H)`` in raw units."""
        ctx = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        if ctx.shape[-1] < self.C:
            raise BaselineError(f"need contexts of at least {self.C} steps, got {ctx.shape[-1]}")
        x, s = self._scaled(ctx[:, -self.C:])
        out = _mlp_np(self.params, x).reshape(-1, len(self.levels), self.H)
        return np.sort(out, axis=1) * s[:, :, None]

    def forecast(self, contexts, H: int, seed: int = 0, keys=None) -> QuantileForecast:
        if H != self.H:
            raise BaselineError(f"model predicts H={self.H}, asked for {H}")
        return QuantileForecast(self.levels, self.predict(contexts))

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint("quantile_regressor",
                          {"C": self.C, "H": self.H, "levels": list(self.levels),
                           "scale_epsilon": self.scale_epsilon},
                          {"params": dict(self.params)})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> QuantileRegressorModel:
        if ckpt.payload_type != "quantile_regressor":
            raise CheckpointError(f"expected a quantile_regressor checkpoint, got {ckpt.payload_type}")
        m = ckpt.meta
        return cls(int(m["C"]), int(m["H"]), tuple(m["levels"]), dict(ckpt.groups["params"]),
                   float(m["scale_epsilon"]))


def _pinball_loss(P, x: np.ndarray, y: np.ndarray, betas: np.ndarray) -> ad.Tensor:
    h = ad.relu(x @ P["w1"] + P["b1"])
    d = y - (h @ P["w2"] + P["b2"])  # pinball(d) = beta*d + relu(-d)
    return ad.mean(d * betas + ad.relu(-d))


def train_quantile_regressor(dataset: WindowedDataset, quantiles: Sequence[float] = DEFAULT_QUANTILES,
                             run: TrainRun | None = None, hidden: int = 64) -> QuantileRegressorModel:
    """Fit all quantile levels jointly by minimising the mean pinball loss.

    Unless ``run.lr`` is set, training uses 1e-3 (the network starts from
    scratch, so the fine-tuning default would be too small).
    """
    run = run or TrainRun(mode="Pretrain")
    if len(dataset) == 0:
        raise BaselineError("dataset is empty")
    levels = tuple(float(q) for q in quantiles)
    C, H, Q = dataset.C, dataset.H, len(levels)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([run.seed, 0x9A17])))
    P = {"w1": rng.normal(0.0, np.sqrt(2.0 / C), (C, hidden)), "b1": np.zeros(hidden),
         "w2": rng.normal(0.0, 0.01, (hidden, Q * H)), "b2": np.tile(np.ones(H), Q)}
    model = QuantileRegressorModel(C, H, levels, P)
    x_all, s = model._scaled(np.asarray(dataset.contexts, dtype=np.float64))
    y_all = np.tile(np.asarray(dataset.targets, dtype=np.float64) / s, (1, Q))
    betas = np.repeat(np.asarray(levels), H)
    lr = 1e-3 if run.lr is None else run.lr
    state = OptimizerState(lr=lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps, weight_decay=run.weight_decay)
    batch_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([run.seed, 0xBA7C])))
    run.loss_curve = []
    t0 = time.perf_counter()
    for it in range(run.iterations):
        idx = batch_rng.integers(0, len(dataset), run.batch_size)
        x, y = x_all[idx], y_all[idx]
        try:
            loss, grads, _ = ad.value_and_grad(lambda T: _pinball_loss(T, x, y, betas), P)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        adamw_step(P, grads, state, lr=warmup_lr(lr, it, run.iterations, run.warmup_frac))
        run.loss_curve.append(loss)
    run.seconds_per_iter = (time.perf_counter() - t0) / run.iterations
    return model
