"""Mean scaling and uniform binning between real windows and token ids."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSpec:
    n_bins: int = 256
    limit: float = 15.0
    scale_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.n_bins < 2:
            raise TokenizerError("n_bins must be >= 2")
        if not self.limit > 0:
            raise TokenizerError("limit must be positive")
        if not self.scale_epsilon > 0:
            raise TokenizerError("scale_epsilon must be positive")

    @property
    def pad_token(self) -> int:
        return self.n_bins

    @property
    def eos_token(self) -> int:
        return self.n_bins + 1

    @property
    def vocab_size(self) -> int:
        return self.n_bins + 2

    @property
    def bin_width(self) -> float:
        return 2.0 * self.limit / self.n_bins

    def centers(self) -> np.ndarray:
        return -self.limit + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    scale: float


def mean_scale(context, spec: TokenizerSpec = TokenizerSpec()) -> tuple[np.ndarray, np.ndarray | float]:
    """Divide by the mean absolute value along the last axis.

    Works on a single window or a stack of windows; ``s`` has the
    leading shape of the input.
    """
    x = np.asarray(context, dtype=np.float64)
    if x.shape[-1] == 0:
        raise TokenizerError("context must be nonempty")
    s = np.maximum(np.mean(np.abs(x), axis=-1), spec.scale_epsilon)
    scaled = x / np.expand_dims(s, -1)
    return scaled, (float(s) if np.ndim(s) == 0 else s)


def bin_index(scaled, spec: TokenizerSpec = TokenizerSpec()) -> np.ndarray:
    v = np.asarray(scaled, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise TokenizerError("cannot tokenize non-finite values")
    L = spec.limit
    v = np.clip(v, -L, np.nextafter(L, -np.inf))
    idx = np.floor((v + L) / spec.bin_width).astype(np.int64)
    return np.clip(idx, 0, spec.n_bins - 1)


def tokenize(scaled, spec: TokenizerSpec = TokenizerSpec(), scale: float = 1.0) -> TokenSequence:
    """Map already-scaled values to bin ids; ``scale`` is carried along for decoding."""
    return TokenSequence(bin_index(scaled, spec), float(scale))


def detokenize(seq: TokenSequence | np.ndarray, spec: TokenizerSpec = TokenizerSpec(), scale=None) -> np.ndarray:
    """Bin centres times the scale.

    Accepts a :class:`TokenSequence` or a raw id array; for arrays,
    ``scale`` broadcasts against the leading axes.
    """
    if isinstance(seq, TokenSequence):
        tokens, s = seq.tokens, seq.scale
    else:
        tokens, s = np.asarray(seq), (1.0 if scale is None else scale)
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any((tokens < 0) | (tokens >= spec.n_bins)):
        bad = tokens[(tokens < 0) | (tokens >= spec.n_bins)].ravel()[0]
        raise TokenizerError(f"token {bad} is not a value bin")
    values = -spec.limit + (tokens + 0.5) * spec.bin_width
    s = np.asarray(s, dtype=np.float64)
    return values * s.reshape(s.shape + (1,) * (values.ndim - s.ndim)) if s.ndim else values * s


def encode_window(context, target=None, spec: TokenizerSpec = TokenizerSpec()):
    """Scale by the context and tokenize context (and target).

    Returns ``(context_tokens, target_tokens_or_None, scale)``.
    """
    scaled_ctx, s = mean_scale(context, spec)
    ctx_tok = bin_index(scaled_ctx, spec)
    if target is None:
        return ctx_tok, None, s
    t = np.asarray(target, dtype=np.float64) / np.expand_dims(np.asarray(s), -1)
    return ctx_tok, bin_index(t, spec), s
