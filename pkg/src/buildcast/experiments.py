"""Scenario runner: data -> (pre)training -> rolling evaluation -> reports.

A scenario is split into independent cells, one per (swept value, series,
seed). Cells may run in worker processes; results are always collected in
sorted cell order, so the outputs do not depend on the worker count.

Outputs in ``output_dir``:

* ``summary.json``: config, aggregated rows and per-cell averages
  (byte-identical across reruns with the same config),
* ``windows.csv``: one line per scored window,
* ``plot_data.csv``: metric mean and std per (row, swept value),
* ``timings.json``: wall-clock figures, kept apart because they vary.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import fit_seasonal_naive, train_quantile_regressor
from .checkpoint import Checkpoint
from .lora import LoraConfig
from .metrics import METRICS, MetricReport, RollingEvalConfig, aggregate, markdown_table, rolling_evaluate
from .model import ModelConfig, TransformerForecaster
from .series import Channel, Season, TimeSeries, make_windows, preprocess, read_csv, read_manifest, split_train_test
from .synth import SynthConfig, generate_series
from .training import PEFT, TrainingDiverged, TrainRun, finetune_full, finetune_peft, pretrain

logger = logging.getLogger(__name__)

SCENARIOS = ("zero_shot", "context_sweep", "fullft", "peft", "rank_sweep", "data_size_ablation", "unseen_zone")
WORKERS_ENV = "BUILDCAST_WORKERS"


class ExperimentError(RuntimeError):
    """A pipeline stage failed. ``exit_code`` follows the CLI convention."""

    CODES = {"config": 1, "data": 2, "pretrain": 3, "finetune": 3, "evaluate": 4, "report": 4}

    def __init__(self, stage: str, cause: str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.exit_code = self.CODES.get(stage, 1)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one scenario run.

    Data comes from ``synth`` (a :class:`SynthConfig` dict) unless
    ``manifest`` names a CSV manifest. Without a ``checkpoint`` the base
    model is pre-trained on ``pretrain_zones`` first (using ``model`` and
    ``pretrain``). Lengths are in steps; ``train_sizes`` applies to
    ``data_size_ablation`` and ``source_zone`` to ``unseen_zone``.
    """

    scenario: str
    output_dir: str = "runs/out"
    synth: dict | None = field(default_factory=dict)
    manifest: str | None = None
    checkpoint: str | None = None
    model: dict = field(default_factory=lambda: {"n_layers": 2, "d_ff": 128})
    pretrain: dict = field(default_factory=lambda: {
        "iterations": 1000, "batch_size": 16, "context_lengths": [96, 192, 480],
        "time_scales": [64, 80, 96, 112, 128, 144]})
    pretrain_zones: list[int] | None = None
    target_zones: list[int] = field(default_factory=lambda: [7])
    seasons: list[str] = field(default_factory=lambda: [s.value for s in Season])
    channel: str = Channel.OCC.value
    C: int = 96
    H: int = 24
    T_test: int = 480
    S: int = 20
    seeds: list[int] = field(default_factory=lambda: [0])
    iterations: int = 1000
    batch_size: int = 16
    lr: float | None = None
    rank: int = 4
    ranks: list[int] = field(default_factory=lambda: [4, 16, 32])
    contexts: list[int] = field(default_factory=lambda: [96, 192, 288, 384, 480, 1920])
    train_sizes: list[int] = field(default_factory=lambda: [480, 1920, 6048])
    ft_mode: str = PEFT
    source_zone: int = 6
    include_zero_shot: bool = True
    baselines: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ExperimentError("config", f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.manifest is None and self.synth is None:
            raise ExperimentError("config", "need a synth config or a manifest")
        if min(self.C, self.H, self.T_test, self.S, self.iterations, self.batch_size) < 1:
            raise ExperimentError("config", "C, H, T_test, S, iterations and batch_size must be >= 1")
        if self.T_test < self.H:
            raise ExperimentError("config", "T_test must be >= H")
        if not self.seeds:
            raise ExperimentError("config", "need at least one seed")
        if self.ft_mode not in ("FullFT", PEFT):
            raise ExperimentError("config", "ft_mode must be FullFT or PEFT")
        bad = set(self.baselines) - {"seasonal_naive", "quantile_regressor"}
        if bad:
            raise ExperimentError("config", f"unknown baselines {sorted(bad)}")
        try:
            Channel(self.channel)
            [Season(s) for s in self.seasons]
        except ValueError as exc:
            raise ExperimentError("config", str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ExperimentError("config", f"unknown config keys {sorted(extra)}")
        if "scenario" not in d:
            raise ExperimentError("config", "config needs a 'scenario'")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ExperimentError("config", f"cannot read {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def reproducible_dict(self) -> dict:
        """Config without the output location, as recorded in the summary."""
        d = self.to_dict()
        d.pop("output_dir")
        return d


# -- data --


def load_series(cfg: ExperimentConfig) -> dict[tuple[int, str], TimeSeries]:
    """All preprocessed series of the configured channel keyed by (zone, season)."""
    try:
        if cfg.manifest is not None:
            out = {}
            for path, sid in read_manifest(cfg.manifest):
                if sid.channel.value == cfg.channel and sid.season.value in cfg.seasons:
                    out[(sid.zone, sid.season.value)] = preprocess(read_csv(path, sid))
            return out
        sc = SynthConfig.from_dict(cfg.synth)
        zones = set(cfg.target_zones) | set(_pretrain_zones(cfg, sc.n_zones))
        if cfg.scenario == "unseen_zone":
            zones.add(cfg.source_zone)
        return {(z, s): preprocess(generate_series(sc, z, Season(s), Channel(cfg.channel)))
                for z in sorted(zones) for s in cfg.seasons}
    except (OSError, ValueError, KeyError) as exc:
        raise ExperimentError("data", f"{type(exc).__name__}: {exc}") from exc


def _pretrain_zones(cfg: ExperimentConfig, n_zones: int) -> list[int]:
    if cfg.pretrain_zones is not None:
        return list(cfg.pretrain_zones)
    return [z for z in range(n_zones) if z not in cfg.target_zones]


def base_checkpoint(cfg: ExperimentConfig, series: dict, out_dir: Path | None = None) -> Checkpoint:
    if cfg.checkpoint is not None:
        try:
            return Checkpoint.load(cfg.checkpoint)
        except (OSError, ValueError) as exc:
            raise ExperimentError("data", f"cannot load checkpoint {cfg.checkpoint}: {exc}") from exc
    n_zones = SynthConfig.from_dict(cfg.synth).n_zones if cfg.synth is not None else 1 + max(z for z, _ in series)
    zones = set(_pretrain_zones(cfg, n_zones))
    corpus = [s for (z, _), s in sorted(series.items()) if z in zones]
    if not corpus:
        raise ExperimentError("data", "no series left for pre-training")
    try:
        run = TrainRun(mode="Pretrain", horizon=cfg.H, **cfg.pretrain)
        ckpt = pretrain(ModelConfig(**cfg.model), corpus, run)
    except TrainingDiverged as exc:
        raise ExperimentError("pretrain", str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ExperimentError("config", f"pretrain settings: {exc}") from exc
    if out_dir is not None:
        ckpt.save(out_dir / "base.ckpt")
    return ckpt


# -- cells --


@dataclass(frozen=True, order=True)
class Cell:
    row: str  # table row, e.g. "zero_shot", "PEFT r=4"
    x: float  # swept value (context length, train size, ...); 0 when nothing is swept
    zone: int
    season: str
    seed: int
    kind: str  # zero_shot | FullFT | PEFT | seasonal_naive | quantile_regressor
    C: int
    rank: int = 0
    train_steps: int = 0  # 0 means the whole training split
    train_zone: int = -1  # -1 means the evaluated zone


def plan_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = []
    seasons = list(cfg.seasons)

    def add(row, kind, x=0.0, C=None, rank=0, train_steps=0, train_zone=-1, zones=None):
        for z in (zones if zones is not None else cfg.target_zones):
            for s in seasons:
                for seed in cfg.seeds:
                    cells.append(Cell(row, float(x), z, s, seed, kind, C or cfg.C, rank, train_steps, train_zone))

    sc = cfg.scenario
    if sc == "context_sweep":
        for C in cfg.contexts:
            add("zero_shot", "zero_shot", x=C, C=C)
    else:
        if cfg.include_zero_shot or sc == "zero_shot":
            add("zero_shot", "zero_shot")
        for b in cfg.baselines:
            add(b, b)
        if sc == "fullft":
            add("FullFT", "FullFT")
        elif sc == "peft":
            add(f"PEFT r={cfg.rank}", PEFT, rank=cfg.rank)
        elif sc == "rank_sweep":
            for r in cfg.ranks:
                add(f"PEFT r={r}", PEFT, x=r, rank=r)
            add("FullFT", "FullFT")
        elif sc == "data_size_ablation":
            for n in cfg.train_sizes:
                add(cfg.ft_mode, cfg.ft_mode, x=n, rank=cfg.rank if cfg.ft_mode == PEFT else 0, train_steps=n)
        elif sc == "unseen_zone":
            rank = cfg.rank if cfg.ft_mode == PEFT else 0
            add(f"{cfg.ft_mode} on zone {cfg.source_zone}", cfg.ft_mode, rank=rank, train_zone=cfg.source_zone)
            add(f"{cfg.ft_mode} on target zone", cfg.ft_mode, rank=rank)
    return sorted(set(cells))


def _train_split(cfg, series, zone, season, train_steps):
    s = series[(zone, season)]
    if len(s) <= cfg.T_test:
        raise ExperimentError("data", f"{s.id.key}: {len(s)} steps cannot hold out T_test={cfg.T_test}")
    return split_train_test(s, cfg.T_test, train_steps or None)


def run_cell(cfg: ExperimentConfig, cell: Cell, series: dict, base: Checkpoint) -> tuple[MetricReport, dict]:
    """Train (if needed) and evaluate one cell; returns the report and timings."""
    train, test = _train_split(cfg, series, cell.zone, cell.season, cell.train_steps)
    fit_train = train
    if cell.train_zone >= 0:
        fit_train, _ = _train_split(cfg, series, cell.train_zone, cell.season, cell.train_steps)
    timing: dict = {}
    if cell.kind == "zero_shot":
        forecaster = TransformerForecaster(base.inference_weights(), base.tokenizer, cfg.S)
    elif cell.kind == "seasonal_naive":
        forecaster = fit_seasonal_naive(fit_train, cfg.H)
    else:
        try:
            ds = make_windows(fit_train, cell.C, cfg.H)
        except ValueError as exc:
            raise ExperimentError("data", f"{fit_train.id.key}: {exc}") from exc
        mode = "Pretrain" if cell.kind == "quantile_regressor" else cell.kind
        run = TrainRun(mode=mode, iterations=cfg.iterations, batch_size=cfg.batch_size, seed=cell.seed,
                       lr=cfg.lr, horizon=cfg.H, context_lengths=(cell.C,))
        stage = "finetune"
        try:
            if cell.kind == "quantile_regressor":
                forecaster = train_quantile_regressor(ds, run=run)
            else:
                if cell.kind == "FullFT":
                    ft = finetune_full(base, ds, run)
                else:
                    ft = finetune_peft(base, ds, LoraConfig(rank=cell.rank), run)
                forecaster = TransformerForecaster(ft.inference_weights(), ft.tokenizer, cfg.S)
        except TrainingDiverged as exc:
            raise ExperimentError(stage, f"{cell}: {exc}") from exc
        except ValueError as exc:
            raise ExperimentError("config", f"{cell}: {exc}") from exc
        timing = {"seconds_per_iter": run.seconds_per_iter, "loss_start": float(np.mean(run.loss_curve[:50])),
                  "loss_end": float(np.mean(run.loss_curve[-50:]))}
    C_eval = cell.C
    if cell.kind == "seasonal_naive":
        C_eval = max(cell.C, forecaster.lag)  # needs one full period; origins are unchanged
    ecfg = RollingEvalConfig(T_test=cfg.T_test, H=cfg.H, C=C_eval, S=cfg.S, seed=cell.seed)
    t0 = time.perf_counter()
    try:
        report = rolling_evaluate(forecaster, test, train, ecfg, name=test.id.key)
    except ValueError as exc:
        raise ExperimentError("data", f"{test.id.key}: {exc}") from exc
    except Exception as exc:
        raise ExperimentError("evaluate", f"{test.id.key}: {exc}") from exc
    timing["eval_seconds"] = time.perf_counter() - t0
    return report, timing


_WORKER_STATE: dict = {}


def _worker_init(cfg_dict: dict, base_bytes: bytes) -> None:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    _WORKER_STATE.update(cfg=cfg, series=load_series(cfg), base=Checkpoint.from_bytes(base_bytes))


def _worker_run(cell: Cell):
    st = _WORKER_STATE
    return run_cell(st["cfg"], cell, st["series"], st["base"])


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ExperimentError("config", f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


# -- outputs --


def _summary(cfg: ExperimentConfig, cells: list[Cell], reports: list[MetricReport]) -> dict:
    rows: dict[str, list[MetricReport]] = {}
    points: dict[tuple[str, float], list[MetricReport]] = {}
    for c, r in zip(cells, reports):
        label = c.row if cfg.scenario != "context_sweep" else f"C={c.C}"
        rows.setdefault(label, []).append(r)
        points.setdefault((c.row, c.x), []).append(r)
    return {
        "scenario": cfg.scenario,
        "config": cfg.reproducible_dict(),
        "rows": {k: aggregate(v) for k, v in rows.items()},
        "plot": [{"row": k[0], "x": k[1], **aggregate(v)} for k, v in sorted(points.items())],
        "cells": [{**asdict(c), "series": r.series, "n_windows": r.n_windows, "mean": r.mean}
                  for c, r in zip(cells, reports)],
    }


def _write_outputs(tmp: Path, summary: dict, cells: list[Cell], reports: list[MetricReport], timings: list[dict]):
    (tmp / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    with open(tmp / "windows.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "x", "seed", "series", "origin", *METRICS])
        for c, r in zip(cells, reports):
            for i, o in enumerate(r.origins):
                w.writerow([c.row, repr(c.x), c.seed, r.series, int(o), *(repr(float(r.scores[m][i])) for m in METRICS)])
    with open(tmp / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "x", "n_series", *(f"{m}_{k}" for m in METRICS for k in ("mean", "std"))])
        for p in summary["plot"]:
            w.writerow([p["row"], repr(p["x"]), p["n_series"],
                        *(repr(p[k][m]) for m in METRICS for k in ("mean", "std"))])
    (tmp / "timings.json").write_text(json.dumps(
        [{"cell": asdict(c), **t} for c, t in zip(cells, timings)], sort_keys=True, indent=1) + "\n")


def run(cfg: ExperimentConfig, workers: int | None = None) -> Path:
    """Execute a scenario end to end and write its reports to ``cfg.output_dir``.

    Everything is first written to a scratch directory next to the target,
    which is renamed into place only when the whole run succeeded.

    Raises:
        ExperimentError: naming the failing stage.
    """
    out = Path(cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        series = load_series(cfg)
        cells = plan_cells(cfg)
        missing = {(c.zone, c.season) for c in cells} - set(series)
        if missing:
            raise ExperimentError("data", f"no data for (zone, season) {sorted(missing)}")
        base = base_checkpoint(cfg, series, tmp)
        workers = n_workers() if workers is None else workers
        if workers > 1 and len(cells) > 1:
            with ProcessPoolExecutor(workers, initializer=_worker_init,
                                     initargs=(cfg.to_dict(), base.to_bytes())) as pool:
                results = list(pool.map(_worker_run, cells))
        else:
            results = []
            for c in cells:
                logger.info("cell %s", c)
                results.append(run_cell(cfg, c, series, base))
        reports = [r for r, _ in results]
        _write_outputs(tmp, _summary(cfg, cells, reports), cells, reports, [t for _, t in results])
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


# -- reporting --


def report(run_dir: str | Path) -> str:
    """Markdown summary of a finished run: ``mean ± std`` per row, then per series."""
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise ExperimentError("report", f"no summary.json in {run_dir}")
    try:
        summary = json.loads(path.read_text())
        rows, cells = summary["rows"], summary["cells"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ExperimentError("report", f"corrupt summary.json: {exc}") from exc
    lines = [f"# Scenario: {summary['scenario']}", "", markdown_table(rows)]
    if summary["scenario"] == "context_sweep":
        lines += ["## MASE by context length", "", "| C | MASE |", "|---|---|"]
        lines += [f"| {int(p['x'])} | {p['mean']['mase']:.3f} ± {p['std']['mase']:.3f} |" for p in summary["plot"]]
        lines.append("")
    zones = sorted({c["zone"] for c in cells})
    seasons = [s.value for s in Season if any(c["season"] == s.value for c in cells)]
    if len(zones) * len(seasons) > 1:
        for label in rows:
            sel = [c for c in cells if (c["row"] if summary["scenario"] != "context_sweep"
                                        else f"C={c['C']}") == label]
            lines += [f"## MASE per zone and season: {label}", "",
                      "| zone | " + " | ".join(seasons) + " |", "|---" * (len(seasons) + 1) + "|"]
            for z in zones:
                vals = []
                for s in seasons:
                    v = [c["mean"]["mase"] for c in sel if c["zone"] == z and c["season"] == s]
                    vals.append(f"{np.mean(v):.3f}" if v else "")
                lines.append(f"| {z} | " + " | ".join(vals) + " |")
            lines.append("")
    return "\n".join(lines)
