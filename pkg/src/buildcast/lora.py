"""Low-rank adapters on the attention query/value projections.

An adapted weight is ``W + (alpha / r) * L @ R`` with ``L`` of shape
``(d_in, r)`` and ``R`` of shape ``(r, d_out)``. ``R`` starts at zero, so
a freshly injected model reproduces the base model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelWeights, param_shapes


class LoraError(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # None means alpha = rank
    targets: tuple[str, ...] = ("wq", "wv")
    layers: tuple[int, ...] | None = None  # None means every layer

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise LoraError("rank must be >= 1")
        if self.alpha is not None and not self.alpha > 0:
            raise LoraError("alpha must be positive")
        if not set(self.targets) <= {"wq", "wv"}:
            raise LoraError("only query ('wq') and value ('wv') projections can be adapted")

    @property
    def scale(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank

    def target_names(self, cfg: ModelConfig) -> list[str]:
        layers = range(cfg.n_layers) if self.layers is None else self.layers
        return [f"l{i}.{t}" for i in layers for t in self.targets]

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets),
                "layers": None if self.layers is None else list(self.layers)}

    @classmethod
    def from_dict(cls, d: dict) -> LoraConfig:
        return cls(int(d["rank"]), d.get("alpha"), tuple(d.get("targets", ("wq", "wv"))),
                   None if d.get("layers") is None else tuple(d["layers"]))


@dataclass
class AdaptedModel:
    """Frozen base weights plus trainable adapters (``<weight>.lora_L/R``)."""

    base: ModelWeights
    lora: LoraConfig
    adapters: dict[str, np.ndarray]
    consumed: bool = field(default=False)

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def all_params(self) -> dict[str, np.ndarray]:
        return {**self.base.params, **self.adapters}

    def delta(self, name: str) -> np.ndarray:
        return self.lora.scale * (self.adapters[name + ".lora_L"] @ self.adapters[name + ".lora_R"])


def inject(weights: ModelWeights, config: LoraConfig, seed: int = 0) -> AdaptedModel:
    """Attach zero-effect adapters to every configured target.

    ``L`` is drawn from ``N(0, 1/r)`` and ``R`` is zero.
    """
    shapes = param_shapes(weights.config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x10A4])))
    adapters = {}
    for name in config.target_names(weights.config):
        if name not in shapes:
            raise LoraError(f"no weight named {name} in this model")
        d1, d2 = shapes[name]
        if config.rank >= min(d1, d2):
            raise LoraError(f"rank {config.rank} is not below min({d1}, {d2}) for {name}")
        adapters[name + ".lora_L"] = rng.normal(0.0, 1.0 / np.sqrt(config.rank), (d1, config.rank))
        adapters[name + ".lora_R"] = np.zeros((config.rank, d2))
    return AdaptedModel(weights, config, adapters)


def merge(model: AdaptedModel) -> ModelWeights:
    """Fold the adapters into a plain copy of the base weights.

    The adapters are marked consumed; merging the same model again is an
    error, since it would add the update twice.
    """
    if model.consumed:
        raise LoraError("adapters were already merged")
    merged = model.base.copy()
    for name in model.lora.target_names(model.config):
        merged.params[name] = merged.params[name] + model.delta(name)
    model.consumed = True
    return merged


def merged_view(model: AdaptedModel) -> ModelWeights:
    """Like :func:`merge` but leaves the adapted model usable."""
    merged = model.base.copy()
    for name in model.lora.target_names(model.config):
        merged.params[name] = merged.params[name] + model.delta(name)
    return merged


def count_trainable(model: ModelWeights | AdaptedModel, config: LoraConfig | None = None) -> dict:
    """Adapter parameter count against the total held by the adapted model."""
    base = model.base if isinstance(model, AdaptedModel) else model
    config = config if config is not None else getattr(model, "lora", None)
    if config is None:
        raise LoraError("need a LoraConfig")
    shapes = param_shapes(base.config)
    trainable = sum((shapes[n][0] + shapes[n][1]) * config.rank for n in config.target_names(base.config))
    total = base.n_params + trainable
    return {"trainable": trainable, "total": total, "ratio": trainable / total}


def flops_estimate(cfg: ModelConfig, lora: LoraConfig | None, mode: str, batch: int, seq_len: int,
                   steps: int, horizon: int) -> int:
    """Matmul FLOPs of ``steps`` training iterations (forward + backward).

    ``seq_len`` is the number of input tokens per sequence and ``horizon``
    the number of scored positions that go through the output head. In
    ``"PEFT"`` mode only adapter weights get gradients; activation
    gradients still flow back to the first adapted layer.
    """
    mode = mode.upper()
    if mode not in ("FULLFT", "PEFT"):
        raise ValueError("mode must be 'FullFT' or 'PEFT'")
    if steps <= 0:
        return 0
    B, T, d, f, V, H = batch, seq_len, cfg.d_model, cfg.d_ff, cfg.vocab, horizon
    proj = 2 * B * T * d * d
    attn = 2 * B * T * T * d  # one of the two score/value products
    ffn = 2 * B * T * d * f  # one of the two feed-forward products
    head = 2 * B * H * d * V

    if mode == "FULLFT":
        per_layer = 4 * proj + 2 * attn + 2 * ffn
        return steps * 3 * (cfg.n_layers * per_layer + head)

    if lora is None:
        raise ValueError("PEFT mode needs a LoraConfig")
    r = lora.rank
    low = 2 * B * T * d * r  # either factor of one adapter product
    adapted = {n: set() for n in range(cfg.n_layers)}
    for name in lora.target_names(cfg):
        layer, w = name.split(".")
        adapted[int(layer[1:])].add(w)
    first = min((i for i, ws in adapted.items() if ws), default=None)
    if first is None:
        raise LoraError("no adapted weights")

    fwd = steps * (cfg.n_layers * (4 * proj + 2 * attn + 2 * ffn) + head
                   + sum(2 * low * len(ws) for ws in adapted.values()))
    bwd = head
    for i in range(cfg.n_layers - 1, -1, -1):
        if i < first:
            break
        ws = adapted[i]
        bwd += 2 * ffn + proj  # input grads through the FFN and output projection
        if i > first:
            # block input carries gradient: every projection back-propagates to it
            bwd += 3 * proj + 4 * attn + 4 * low * len(ws)
        else:
            # first adapted block: its input is constant, so keys get no gradient and
            # adapters skip the input-gradient product; value grad is one attention-sized
            # product, a query grad needs two (score grad, then query grad)
            bwd += (("wv" in ws) + 2 * ("wq" in ws)) * attn + 3 * low * len(ws)
    return fwd + steps * bwd
