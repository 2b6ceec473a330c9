"""Pre-training, full fine-tuning and LoRA fine-tuning loops."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .lora import LoraConfig, inject
from .model import ModelConfig, TokenBatch, batch_loss, init_weights
from .optim import OptimizerState, adamw_step, warmup_lr
from .series import TimeSeries, WindowedDataset
from .tokenizer import TokenizerSpec, encode_window

logger = logging.getLogger(__name__)

PRETRAIN, FULLFT, PEFT = "Pretrain", "FullFT", "PEFT"
_DEFAULT_LR = {PRETRAIN: 1e-3, FULLFT: 1e-4, PEFT: 1e-3}  # zero-init adapters need a larger step
_BATCH_STREAM = 0xBA7C


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, cause: str):
        super().__init__(f"loss became non-finite at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class TrainRun:
    """Settings of one training run; ``loss_curve`` is filled in as it runs.

    ``context_lengths`` and ``time_scales`` only matter for pre-training:
    each batch draws one context length, and every corpus series is also
    offered resampled to each entry of ``time_scales`` (steps per day).
    """

    mode: str = FULLFT
    iterations: int = 1000
    batch_size: int = 32
    seed: int = 0
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    horizon: int = 24
    context_lengths: tuple[int, ...] = (96,)
    time_scales: tuple[int, ...] = (96,)
    loss_curve: list[float] = field(default_factory=list)
    seconds_per_iter: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in _DEFAULT_LR:
            raise ValueError(f"mode must be one of {sorted(_DEFAULT_LR)}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.context_lengths = tuple(int(c) for c in self.context_lengths)
        self.time_scales = tuple(int(s) for s in self.time_scales)

    @property
    def learning_rate(self) -> float:
        return _DEFAULT_LR[self.mode] if self.lr is None else self.lr

    def to_meta(self) -> dict:
        d = asdict(self)
        d.pop("seconds_per_iter")
        d["lr"] = self.learning_rate
        d["context_lengths"] = list(self.context_lengths)
        d["time_scales"] = list(self.time_scales)
        return d


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _BATCH_STREAM])))


def _loop(cfg: ModelConfig, params: dict[str, np.ndarray], trainable: list[str], next_batch, run: TrainRun,
          lora_scale: float = 1.0) -> None:
    state = OptimizerState(lr=run.learning_rate, beta1=run.beta1, beta2=run.beta2, eps=run.eps,
                           weight_decay=run.weight_decay)
    run.loss_curve = []
    t0 = time.perf_counter()
    for it in range(run.iterations):
        batch = next_batch()

        def loss_fn(P):
            return batch_loss(cfg, P, batch, lora_scale=lora_scale)[0]

        try:
            loss, grads, _ = ad.value_and_grad(loss_fn, params, wrt=trainable)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(it, str(exc)) from exc
        lr = warmup_lr(run.learning_rate, it, run.iterations, run.warmup_frac)
        adamw_step(params, grads, state, lr=lr)
        run.loss_curve.append(loss)
        if (it + 1) % 100 == 0:
            logger.info("%s iter %d loss %.4f", run.mode, it + 1, np.mean(run.loss_curve[-100:]))
    run.seconds_per_iter = (time.perf_counter() - t0) / run.iterations


def _stretch(values: np.ndarray, factor: float) -> np.ndarray:
    """Linearly resample so one original step becomes ``factor`` steps."""
    n = int(np.floor((values.size - 1) * factor)) + 1
    return np.interp(np.arange(n) / factor, np.arange(values.size), values)


def pretrain(config: ModelConfig, corpus: list[TimeSeries], run: TrainRun,
             spec: TokenizerSpec = TokenizerSpec(), base_steps_per_day: int = 96) -> Checkpoint:
    """Train fresh weights on windows drawn uniformly across the corpus."""
    if run.mode != PRETRAIN:
        raise ValueError("pretrain needs a TrainRun with mode='Pretrain'")
    if not corpus:
        raise ValueError("corpus is empty")
    if max(run.context_lengths) + run.horizon > config.max_context + 1:
        raise ValueError("context + horizon exceeds max_context")
    pool = [_stretch(s.values, k / base_steps_per_day) if k != base_steps_per_day else np.asarray(s.values)
            for k in run.time_scales for s in corpus]
    need = max(run.context_lengths) + run.horizon
    pool = [v for v in pool if v.size >= need]
    if not pool:
        raise ValueError(f"no corpus series is long enough for windows of {need} steps")
    weights = init_weights(config, run.seed)
    rng = _batch_rng(run.seed)
    H = run.horizon

    def next_batch() -> TokenBatch:
        C = int(rng.choice(run.context_lengths))
        picks = rng.integers(0, len(pool), run.batch_size)
        rows = []
        for p in picks:
            v = pool[p]
            o = int(rng.integers(C, v.size - H + 1))
            rows.append(v[o - C:o + H])
        rows = np.stack(rows)
        ctx, tgt, _ = encode_window(rows[:, :C], rows[:, C:], spec)
        return TokenBatch(ctx, tgt)

    _loop(config, weights.params, list(weights.params), next_batch, run)
    return Checkpoint.from_model(weights, spec, run.to_meta())


def _dataset_batches(dataset: WindowedDataset, run: TrainRun, spec: TokenizerSpec):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    ctx, tgt, _ = encode_window(dataset.contexts, dataset.targets, spec)
    rng = _batch_rng(run.seed)

    def next_batch() -> TokenBatch:
        idx = rng.integers(0, len(dataset), run.batch_size)
        return TokenBatch(ctx[idx], tgt[idx])

    return next_batch


def _check_fit(base: Checkpoint, dataset: WindowedDataset) -> None:
    cfg = base.model_config
    if dataset.C + dataset.H - 1 > cfg.max_context:
        raise ValueError(f"windows of C={dataset.C}, H={dataset.H} exceed max_context={cfg.max_context}")


def finetune_full(base: Checkpoint, dataset: WindowedDataset, run: TrainRun) -> Checkpoint:
    """Update every parameter on the fine-tuning windows."""
    if run.mode != FULLFT:
        raise ValueError("finetune_full needs a TrainRun with mode='FullFT'")
    _check_fit(base, dataset)
    weights = base.base_weights()
    spec = base.tokenizer
    _loop(weights.config, weights.params, list(weights.params), _dataset_batches(dataset, run, spec), run)
    return Checkpoint.from_model(weights, spec, run.to_meta())


def finetune_peft(base: Checkpoint, dataset: WindowedDataset, lora: LoraConfig, run: TrainRun) -> Checkpoint:
    """Train LoRA adapters only; the base weights are left untouched."""
    if run.mode != PEFT:
        raise ValueError("finetune_peft needs a TrainRun with mode='PEFT'")
    _check_fit(base, dataset)
    adapted = inject(base.base_weights(), lora, run.seed)
    spec = base.tokenizer
    params = adapted.all_params()
    # base arrays are shared with `adapted.base`; only adapter names are handed to the optimizer
    _loop(adapted.config, params, list(adapted.adapters), _dataset_batches(dataset, run, spec), run,
          lora_scale=lora.scale)
    return Checkpoint.from_model(adapted.base, spec, run.to_meta(), adapted=adapted)
