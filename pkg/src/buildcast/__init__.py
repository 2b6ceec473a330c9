"""Tokenized transformer forecasting, LoRA fine-tuning and scaled metrics for building data."""

from .baselines import QuantileForecast, QuantileRegressorModel, SeasonalNaiveModel, fit_seasonal_naive, \
    seasonal_naive_forecast, train_quantile_regressor
from .checkpoint import Checkpoint
from .lora import AdaptedModel, LoraConfig, count_trainable, flops_estimate, inject, merge
from .metrics import MetricReport, RollingEvalConfig, ScalingFactors, aggregate, mase, msis, rmsse, \
    rolling_evaluate, scaling_factors, wql
from .model import ForecastDistribution, ModelConfig, ModelWeights, TransformerForecaster, init_weights, \
    sample_forecast
from .series import Channel, Season, SeriesId, TimeSeries, WindowedDataset, WorkCalendar, make_windows
from .synth import SynthConfig, SynthOracle, generate_corpus, generate_series
from .tokenizer import TokenizerSpec, detokenize, encode_window, tokenize
from .training import TrainRun, TrainingDiverged, finetune_full, finetune_peft, pretrain

__version__ = "0.1.0"
