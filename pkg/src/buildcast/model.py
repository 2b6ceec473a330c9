"""Decoder-only transformer over token streams, trained by next-token cross-entropy.

Pre-LN blocks with learned positional embeddings. Training uses the
:mod:`buildcast.autodiff` tensors; sampling runs a plain-numpy path that
caches keys and values, built from the same kernels so the two agree to
rounding.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .tokenizer import TokenizerSpec, detokenize, encode_window

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab: int = 258
    max_context: int = 512
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab, self.max_context) < 1:
            raise ModelError("all sizes must be positive")
        if self.dropout != 0.0:
            raise ModelError("dropout is not supported")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab, d), "pos_emb": (cfg.max_context, d)}
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "w_out": (d, cfg.vocab), "b_out": (cfg.vocab,)})
    return shapes


class ModelWeights:
    """Named float64 parameter arrays plus the config they belong to."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(shapes) != set(params):
            missing = set(shapes) ^ set(params)
            raise ModelError(f"parameter names do not match config: {sorted(missing)[:4]}")
        for n, s in shapes.items():
            if params[n].shape != s:
                raise ModelError(f"{n} has shape {params[n].shape}, expected {s}")
        self.config = config
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n in shapes}

    def copy(self) -> ModelWeights:
        return ModelWeights(self.config, {n: v.copy() for n, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        """The parameter vector theta, in declaration order."""
        return np.concatenate([v.ravel() for v in self.params.values()])

    def digest(self) -> str:
        return params_digest(self.params)


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return h.hexdigest()


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x1417])))
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for n, s in param_shapes(cfg).items():
        leaf = n.split(".")[-1]
        if leaf == "g":
            params[n] = np.ones(s)
        elif leaf in ("b", "b1", "b2", "b_out"):
            params[n] = np.zeros(s)
        elif leaf in ("wo", "w2"):
            params[n] = rng.normal(0.0, resid_std, s)
        else:
            params[n] = rng.normal(0.0, 0.02, s)
    return ModelWeights(cfg, params)


# --- training-time forward (autodiff tensors) --------------------------------------


def _proj(h, P, name, lora_scale):
    out = h @ P[name]
    a = P.get(name + ".lora_L")
    if a is not None:
        out = out + ad.scale((h @ a) @ P[name + ".lora_R"], lora_scale)
    return out


def forward_tensors(cfg: ModelConfig, P: dict, tokens: np.ndarray, out_start: int = 0,
                    lora_scale: float = 1.0) -> ad.Tensor:
    """Logits at positions ``out_start ..`` for a ``(B, T)`` token batch.

    ``P`` maps parameter names to tensors; adapter entries named
    ``<weight>.lora_L`` / ``<weight>.lora_R`` are applied when present.
    """
    B, T = tokens.shape
    if T > cfg.max_context:
        raise ModelError(f"sequence of {T} tokens exceeds max_context={cfg.max_context}")
    nh, dh = cfg.n_heads, cfg.d_head
    x = ad.embedding(P["tok_emb"], tokens) + ad.getitem(P["pos_emb"], slice(0, T))
    for i in range(cfg.n_layers):
        p = f"l{i}."
        h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q = _proj(h, P, p + "wq", lora_scale)
        k = h @ P[p + "wk"]
        v = _proj(h, P, p + "wv", lora_scale)
        q, k, v = (ad.transpose(ad.reshape(t, (B, T, nh, dh)), (0, 2, 1, 3)) for t in (q, k, v))
        att = ad.attention(q, k, v, True)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + att @ P[p + "wo"]
        h2 = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        x = x + ad.gelu(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
    if out_start:
        x = ad.getitem(x, (slice(None), slice(out_start, None)))
    x = ad.layer_norm(x, P["lnf.g"], P["lnf.b"])
    return x @ P["w_out"] + P["b_out"]


@dataclass(frozen=True)
class TokenBatch:
    """Context tokens ``(B, C)`` and target tokens ``(B, H)``.

    The model reads ``context ‖ target[:-1]`` and is scored on predicting
    each target token from everything before it.
    """

    context: np.ndarray
    target: np.ndarray

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.context, self.target[:, :-1]], axis=1)

    @property
    def out_start(self) -> int:
        return self.context.shape[1] - 1


def batch_loss(cfg: ModelConfig, P: dict, batch: TokenBatch, pad_token: int | None = None,
               lora_scale: float = 1.0):
    """Mean cross-entropy over the target positions (pad targets excluded)."""
    logits = forward_tensors(cfg, P, batch.inputs, batch.out_start, lora_scale)
    weights = None if pad_token is None else (batch.target != pad_token)
    return ad.cross_entropy(logits, batch.target, weights), logits


def forward_loss(weights: ModelWeights, batch: TokenBatch, pad_token: int | None = None):
    """Scalar loss and target-position logits ``(B, H, vocab)`` for plain weights."""
    P = {n: ad.Tensor(v) for n, v in weights.params.items()}
    loss, logits = batch_loss(weights.config, P, batch, pad_token)
    return float(loss.data), logits.data


def attention(Q, K, V, causal_mask=True) -> np.ndarray:
    """Scaled dot-product attention on plain arrays (see :func:`autodiff.attention`)."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if causal_mask is True:
        causal_mask = ad.causal_mask(Q.shape[-2], K.shape[-2])
    elif causal_mask is False:
        causal_mask = None
    return ad.attention_np(Q, K, V, causal_mask)


# --- inference with a key/value cache ---------------------------------------------------


class _KVCache:
    def __init__(self, cfg: ModelConfig, n: int, capacity: int):
        shape = (n, cfg.n_heads, capacity, cfg.d_head)
        self.k = [np.empty(shape) for _ in range(cfg.n_layers)]
        self.v = [np.empty(shape) for _ in range(cfg.n_layers)]
        self.length = 0

    def repeat(self, times: int) -> _KVCache:
        out = object.__new__(_KVCache)
        out.k = [np.repeat(a, times, axis=0) for a in self.k]
        out.v = [np.repeat(a, times, axis=0) for a in self.v]
        out.length = self.length
        return out


def _np_step(cfg: ModelConfig, P: dict[str, np.ndarray], tokens: np.ndarray, cache: _KVCache) -> np.ndarray:
    """Append ``tokens`` (N, t) to the cache; return final-position logits (N, vocab)."""
    N, t = tokens.shape
    start = cache.length
    nh, dh = cfg.n_heads, cfg.d_head
    x = P["tok_emb"][tokens] + P["pos_emb"][start:start + t]
    mask = ad.causal_mask(t, start + t)
    for i in range(cfg.n_layers):
        p = f"l{i}."
        h = ad.layer_norm_np(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q, k, v = ((h @ P[p + w]).reshape(N, t, nh, dh).transpose(0, 2, 1, 3) for w in ("wq", "wk", "wv"))
        cache.k[i][:, :, start:start + t] = k
        cache.v[i][:, :, start:start + t] = v
        att = ad.attention_np(q, cache.k[i][:, :, :start + t], cache.v[i][:, :, :start + t], mask)
        x = x + att.transpose(0, 2, 1, 3).reshape(N, t, cfg.d_model) @ P[p + "wo"]
        h2 = ad.layer_norm_np(x, P[p + "ln2.g"], P[p + "ln2.b"])
        x = x + ad.gelu_np(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
    cache.length = start + t
    last = ad.layer_norm_np(x[:, -1], P["lnf.g"], P["lnf.b"])
    return last @ P["w_out"] + P["b_out"]


def next_token_logits(weights: ModelWeights, tokens: np.ndarray) -> np.ndarray:
    """Logits for the token following each row of ``tokens`` (no cache reuse)."""
    tokens = np.atleast_2d(tokens)
    cache = _KVCache(weights.config, tokens.shape[0], tokens.shape[1])
    return _np_step(weights.config, weights.params, tokens, cache)


@dataclass(frozen=True)
class ForecastDistribution:
    """Sample paths of shape ``(..., S, H)`` in raw units."""

    samples: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim < 2 or s.shape[-2] < 2:
            raise ModelError("need at least two sample paths")
        if not np.all(np.isfinite(s)):
            raise ModelError("forecast samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[-2]

    @property
    def horizon(self) -> int:
        return self.samples.shape[-1]

    def quantile(self, beta: float) -> np.ndarray:
        return extract_quantile(self, beta)

    def mean(self) -> np.ndarray:
        return mean_path(self)

    def __getitem__(self, i) -> ForecastDistribution:
        return ForecastDistribution(self.samples[i])


def extract_quantile(dist: ForecastDistribution, beta: float) -> np.ndarray:
    """Per-step empirical quantile, interpolating order statistics at ``(S-1)*beta``."""
    if not 0.0 < beta < 1.0:
        raise ModelError("beta must lie in (0, 1)")
    return np.quantile(dist.samples, beta, axis=-2, method="linear")


def mean_path(dist: ForecastDistribution) -> np.ndarray:
    return dist.samples.mean(axis=-2)


def _origin_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, int(key), 0x5A3F])))


def _truncate(contexts: np.ndarray, H: int, cfg: ModelConfig) -> np.ndarray:
    room = cfg.max_context - H
    if room < 1:
        raise ModelError(f"H={H} leaves no room for context within max_context={cfg.max_context}")
    if contexts.shape[-1] > room:
        logger.warning("context of %d steps truncated to the most recent %d (max_context=%d, H=%d)",
                       contexts.shape[-1], room, cfg.max_context, H)
        contexts = contexts[..., -room:]
    return contexts


def forecast_batch(weights: ModelWeights, contexts: np.ndarray, H: int, S: int = 20, rng_seed: int = 0,
                   keys=None, spec: TokenizerSpec = TokenizerSpec(), memory_mb: float = 256.0) -> np.ndarray:
    """Sample ``S`` paths of length ``H`` for every row of ``contexts``.

    Each row draws from its own random stream keyed on ``(rng_seed,
    keys[i])`` (``keys`` defaults to the row index), so results do not
    depend on how rows are grouped. Returns an array ``(N, S, H)``.
    """
    cfg = weights.config
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if contexts.shape[-1] < 1:
        raise ModelError("context must contain at least one sample")
    if S < 2:
        raise ModelError("need S >= 2 samples")
    if spec.vocab_size != cfg.vocab:
        raise ModelError(f"tokenizer vocab {spec.vocab_size} != model vocab {cfg.vocab}")
    contexts = _truncate(contexts, H, cfg)
    N, C = contexts.shape
    keys = np.arange(N) if keys is None else np.asarray(keys)
    per_row = 8.0 * 2 * cfg.n_layers * S * (C + H) * cfg.d_model + 8.0 * S * cfg.vocab * 4
    chunk = max(1, int(memory_mb * 2 ** 20 // per_row))
    out = np.empty((N, S, H))
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        out[lo:hi] = _sample_chunk(weights, contexts[lo:hi], H, S, rng_seed, keys[lo:hi], spec)
    return out


def _sample_chunk(weights, contexts, H, S, rng_seed, keys, spec) -> np.ndarray:
    cfg, P = weights.config, weights.params
    n, C = contexts.shape
    ctx_tok, _, scale = encode_window(contexts, spec=spec)
    cache = _KVCache(cfg, n, C + H - 1)
    logits = _np_step(cfg, P, ctx_tok, cache)
    cache = cache.repeat(S)
    logits = np.repeat(logits, S, axis=0)
    rngs = [_origin_rng(rng_seed, k) for k in keys]
    tokens = np.empty((n * S, H), dtype=np.int64)
    for j in range(H):
        u = np.concatenate([r.random(S) for r in rngs])
        probs = ad.softmax_np(logits[:, :spec.n_bins])
        cdf = np.cumsum(probs, axis=-1)
        tok = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1), spec.n_bins - 1)
        tokens[:, j] = tok
        if j + 1 < H:
            logits = _np_step(cfg, P, tok[:, None], cache)
    values = detokenize(tokens.reshape(n, S, H), spec, np.asarray(scale).reshape(n, 1))
    return values


def sample_forecast(weights: ModelWeights, context, H: int, S: int = 20, rng_seed: int = 0,
                    spec: TokenizerSpec = TokenizerSpec()) -> ForecastDistribution:
    """Autoregressive sample paths for a single context window."""
    return ForecastDistribution(forecast_batch(weights, np.asarray(context)[None], H, S, rng_seed, spec=spec)[0])


class TransformerForecaster:
    """Adapter exposing a model through the common forecaster interface."""

    def __init__(self, weights: ModelWeights, spec: TokenizerSpec = TokenizerSpec(), n_samples: int = 20):
        self.weights = weights
        self.spec = spec
        self.n_samples = n_samples

    def forecast(self, contexts: np.ndarray, H: int, seed: int = 0, keys=None) -> ForecastDistribution:
        return ForecastDistribution(
            forecast_batch(self.weights, contexts, H, self.n_samples, seed, keys, self.spec))
