"""Command-line entry point.

Subcommands: ``synth``, ``pretrain``, ``finetune``, ``evaluate``, ``sweep``
and ``report``. Each takes ``--config file.json``; ``--set key=value``
(value parsed as JSON when possible) and the dedicated flags override it.
The number of worker processes for ``sweep`` comes from the
``BUILDCAST_WORKERS`` environment variable.

Exit codes: 0 success, 1 config error, 2 data error, 3 training
divergence, 4 evaluation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import fit_seasonal_naive
from .checkpoint import Checkpoint
from .experiments import ExperimentConfig, ExperimentError, report, run
from .lora import LoraConfig
from .metrics import RollingEvalConfig, rolling_evaluate
from .model import ModelConfig, TransformerForecaster
from .series import make_windows, preprocess, read_csv, read_manifest, split_train_test
from .synth import SynthConfig, generate_corpus, write_corpus
from .training import TrainingDiverged, TrainRun, finetune_full, finetune_peft, pretrain

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_EVAL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _settings(args, defaults: dict | None = None) -> dict:
    d = dict(defaults or {})
    if args.config:
        try:
            d.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config {args.config}: {exc}") from exc
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(EXIT_CONFIG, f"--set expects key=value, got {item!r}")
        d[key] = _parse_value(value)
    return d


def _override(d: dict, **kw) -> dict:
    d.update({k: v for k, v in kw.items() if v is not None})
    return d


def _load_series(manifest: str, channel: str | None = None):
    """Preprocessed series listed in a manifest, in manifest order."""
    try:
        return [preprocess(read_csv(p, sid)) for p, sid in read_manifest(manifest)
                if channel is None or sid.channel.value == channel]
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot load data from {manifest}: {exc}") from exc


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {path}: {exc}") from exc


def _pick(series, key: str | None):
    if key is None:
        if len(series) != 1:
            raise CliError(EXIT_CONFIG, "manifest holds several series; choose one with --series")
        return series[0]
    for s in series:
        if s.id.key == key:
            return s
    raise CliError(EXIT_DATA, f"series {key!r} not in manifest")


# -- subcommands --


def cmd_synth(args) -> int:
    d = _override(_settings(args), seed=args.seed, n_zones=args.zones, days=args.days)
    out = d.pop("out", None) or args.out
    try:
        cfg = SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad synth config: {exc}") from exc
    path = write_corpus(generate_corpus(cfg), out, cfg)
    print(path)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    d = _settings(args)
    model = ModelConfig(**d.pop("model", {}))
    data = d.pop("data", None) or args.data
    out = d.pop("out", None) or args.out
    if data is None:
        raise CliError(EXIT_CONFIG, "pretrain needs --data <manifest.json>")
    d = _override(d, iterations=args.iterations, seed=args.seed)
    try:
        run_cfg = TrainRun(mode="Pretrain", **d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad training config: {exc}") from exc
    corpus = _load_series(data)
    ckpt = pretrain(model, corpus, run_cfg)
    ckpt.save(out)
    print(out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    d = _settings(args)
    base = _load_ckpt(args.checkpoint)
    series = _pick(_load_series(args.data), args.series)
    C, H, test = int(d.pop("C", args.C)), int(d.pop("H", args.H)), int(d.pop("T_test", args.T_test))
    rank = int(d.pop("rank", args.rank))
    mode = args.mode
    d = _override(d, iterations=args.iterations, seed=args.seed)
    try:
        train, _ = split_train_test(series, test)
        ds = make_windows(train, C, H)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    try:
        run_cfg = TrainRun(mode=mode, horizon=H, **d)
        ckpt = (finetune_full(base, ds, run_cfg) if mode == "FullFT"
                else finetune_peft(base, ds, LoraConfig(rank=rank), run_cfg))
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    ckpt.save(args.out)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    d = _settings(args, {"T_test": 480})
    series = _pick(_load_series(args.data), args.series)
    try:
        cfg = RollingEvalConfig(**_override(d, C=args.C, H=args.H, T_test=args.T_test, seed=args.seed))
        train, test = split_train_test(series, cfg.T_test)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    if args.checkpoint == "seasonal_naive":
        forecaster = fit_seasonal_naive(train, cfg.H, cfg.C_ref)
    else:
        ck = _load_ckpt(args.checkpoint)
        forecaster = TransformerForecaster(ck.inference_weights(), ck.tokenizer, cfg.S)
    rep = rolling_evaluate(forecaster, test, train, cfg, name=series.id.key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json())
    (out / "windows.csv").write_text(rep.to_csv())
    print(json.dumps(rep.mean, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    d = _override(_settings(args), scenario=args.scenario, output_dir=args.out, checkpoint=args.checkpoint)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    cfg = ExperimentConfig.from_dict(d)
    out = run(cfg)
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    text = report(args.run_dir)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="buildcast", description="Tokenized transformer forecasting for building data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON settings file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic corpus as CSV + manifest")
    common(sp)
    sp.add_argument("--out", default="data/synth")
    sp.add_argument("--zones", type=int)
    sp.add_argument("--days", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="train a base model on a corpus")
    common(sp)
    sp.add_argument("--data", help="manifest.json of the corpus")
    sp.add_argument("--out", default="base.ckpt")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint on one series")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--series", help="series key, e.g. z7-winter-Occ")
    sp.add_argument("--mode", choices=["FullFT", "PEFT"], default="PEFT")
    sp.add_argument("--rank", type=int, default=4)
    sp.add_argument("--C", type=int, default=96)
    sp.add_argument("--H", type=int, default=24)
    sp.add_argument("--T-test", dest="T_test", type=int, default=480, help="held-out steps")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", default="finetuned.ckpt")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="rolling evaluation of a checkpoint on one series")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint path, or 'seasonal_naive'")
    sp.add_argument("--data", required=True)
    sp.add_argument("--series")
    sp.add_argument("--C", type=int)
    sp.add_argument("--H", type=int)
    sp.add_argument("--T-test", dest="T_test", type=int)
    sp.add_argument("--out", default="eval")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="run an experiment scenario")
    common(sp)
    sp.add_argument("--scenario")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="render a finished run as markdown")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
