"""A scaled-down experiment: pre-train, fine-tune both ways, compare to baselines.

The full-size scenarios take tens of minutes on one core; this version
shrinks the model and iteration counts so it finishes in under a minute.
Numbers are therefore only indicative.
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from buildcast.experiments import ExperimentConfig, report, run


def main(out: str | None = None) -> None:
    out_dir = Path(out or tempfile.mkdtemp()) / "rank_sweep"
    cfg = ExperimentConfig.from_dict({
        "scenario": "rank_sweep",
        "output_dir": str(out_dir),
        "synth": {"n_zones": 3, "days": 42, "seed": 0},
        "model": {"n_layers": 1, "d_model": 32, "n_heads": 2, "d_ff": 64, "max_context": 256},
        "pretrain": {"iterations": 800, "batch_size": 8, "context_lengths": [96], "time_scales": [80, 96, 112]},
        "pretrain_zones": [0, 1],
        "target_zones": [2],
        "seasons": ["winter"],
        "T_test": 192,
        "iterations": 400,
        "batch_size": 8,
        "ranks": [2, 8],
        "baselines": ["seasonal_naive", "quantile_regressor"],
    })
    path = run(cfg)
    print(report(path))
    print(f"outputs in {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
