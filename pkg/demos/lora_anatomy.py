"""Inspect low-rank adapters on the default forecasting model.

Shows the trainable share per rank, that fresh adapters change nothing,
and that merging reproduces the adapted forward pass. Runs in seconds.
"""

from __future__ import annotations

import numpy as np

from buildcast import autodiff as ad
from buildcast.lora import LoraConfig, count_trainable, inject, merge
from buildcast.model import ModelConfig, forward_tensors, init_weights


def logits(cfg, params, tokens):
    return forward_tensors(cfg, {n: ad.Tensor(v) for n, v in params.items()}, tokens).data


def main() -> None:
    cfg = ModelConfig()
    base = init_weights(cfg, seed=0)
    print(f"default model: {cfg.n_layers} layers, d_model {cfg.d_model}, {base.n_params} parameters")
    for r in (1, 4, 16, 32):
        c = count_trainable(inject(base, LoraConfig(rank=r)))
        print(f"  rank {r:2d}: {c['trainable']:6d} trainable ({100 * c['ratio']:.2f}%)")

    tokens = np.random.default_rng(0).integers(0, 256, (1, 48))
    adapted = inject(base, LoraConfig(rank=4))
    same = np.array_equal(logits(cfg, adapted.all_params(), tokens), logits(cfg, base.params, tokens))
    print("fresh adapters leave logits bit-identical:", same)

    # pretend training moved the R factors
    rng = np.random.default_rng(1)
    for name in adapted.adapters:
        if name.endswith("lora_R"):
            adapted.adapters[name] = rng.normal(0, 0.05, adapted.adapters[name].shape)
    before = logits(cfg, adapted.all_params(), tokens)
    merged = merge(adapted)
    print(f"merge vs adapted forward, max |diff|: {np.max(np.abs(before - logits(cfg, merged.params, tokens))):.2e}")
    print("base weights untouched by merge:", adapted.base.digest() == base.digest())


if __name__ == "__main__":
    main()
