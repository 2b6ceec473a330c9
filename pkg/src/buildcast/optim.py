"""AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0 or self.eps < 0 or self.weight_decay < 0:
            raise ValueError("lr, eps and weight_decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None) -> None:
    """One in-place AdamW update of every parameter named in ``grads``.

    ``lr`` overrides ``state.lr`` for this step (used by warmup schedules).
    Decay is applied first, ``p <- p * (1 - lr * wd)``, then the
    bias-corrected Adam step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for '{name}'")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant.

    ``step`` is 0-based; the first step already uses a nonzero rate.
    """
    warm = int(round(warmup_frac * total_steps))
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * (step + 1) / warm
