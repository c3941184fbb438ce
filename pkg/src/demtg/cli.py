"""Command-line entry point: synth, train, eval, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import ConfigError, ContractError, DimensionError
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import RunConfig
from .data import DatasetFormatError, nyud_task_table, read_dataset, synth_dataset, write_dataset
from .metrics import MetricReport, TaskScore, delta_m
from .train import NonFiniteLossError, build_model, evaluate, log_line, train
from .verify import RULES, run_suite

log = logging.getLogger("demtg")

EXIT_FAIL = 1
EXIT_ERROR = 2
EXIT_NONFINITE = 3

_DIRECTIONS = {"hi": "higher", "higher": "higher", "lo": "lower", "lower": "lower"}


def parse_scores(text: str) -> tuple[list[float], list[str]]:
    """``"0.43:hi,0.61:lo"`` -> ([0.43, 0.61], ["higher", "lower"])."""
    values, better = [], []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        value, sep, d = item.rpartition(":")
        if not sep or d.strip().lower() not in _DIRECTIONS:
            raise ConfigError(f"score {item!r} must look like VALUE:hi or VALUE:lo")
        try:
            values.append(float(value))
        except ValueError:
            raise ConfigError(f"score {item!r}: {value!r} is not a number") from None
        better.append(_DIRECTIONS[d.strip().lower()])
    if not values:
        raise ConfigError("empty score list")
    return values, better


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    samples = synth_dataset(args.seed, args.n, args.hw, args.hw, args.classes)
    write_dataset(samples, args.out, nyud_task_table(args.classes))
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve

    cfg = _load_config(args)
    out = Path(args.out or cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    samples, tasks = read_dataset(args.data or cfg.data_path)
    model = build_model(cfg, tasks)
    with open(out / "train.jsonl", "w") as fh:
        def emit(rec):
            line = log_line(rec)
            fh.write(line + "\n")
            if not args.quiet:
                print(line, flush=True)
        records = train(model, samples, cfg, emit)
    save_checkpoint(out / "model.ckpt", model.store, cfg.to_text())
    plot_loss_curve(records, out / "loss.png")
    log.info("checkpoint %s, loss curve %s", out / "model.ckpt", out / "loss.png")
    return 0


def _baseline_scores(spec: str) -> tuple[list[float], list[str] | None]:
    # either an inline score list or a previously written report
    p = Path(spec)
    if p.suffix == ".json" and p.exists():
        return MetricReport.from_json(p.read_text()).scores(), None
    return parse_scores(spec)


def cmd_eval(args) -> int:
    if args.scores:
        multi, better = parse_scores(args.scores)
        if not args.baseline:
            raise ConfigError("--scores needs --baseline")
        single, better_b = _baseline_scores(args.baseline)
        if better_b is not None and better_b != better:
            raise ConfigError("--scores and --baseline disagree on metric directions")
        report = MetricReport([TaskScore(f"task{i}", "", v) for i, v in enumerate(multi)],
                              delta_m(multi, single, better))
        print(report.to_json(), end="")
        if args.out:
            Path(args.out).write_text(report.to_json())
        return 0

    if not args.checkpoint or not args.data:
        raise ConfigError("eval needs --checkpoint and --data (or --scores)")
    params, buffers, cfg_text = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_text(cfg_text)
    samples, tasks = read_dataset(args.data)
    model = build_model(cfg, tasks)
    restore_into(model.store, params, buffers)
    report = evaluate(model, samples, cfg.eval_thresholds)
    if args.baseline:
        single, better = _baseline_scores(args.baseline)
        expected = [t.better for t in model.tasks]
        if better is not None and better != expected:
            raise ConfigError(f"baseline directions {better} do not match tasks {expected}")
        # computed from the scores as printed, so a report fed back as its
        # own baseline gives exactly zero
        printed = [round(v, 4) for v in report.scores()]
        report.delta_m = delta_m(printed, single, expected)
    print(report.to_json(), end="")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("report.json")
    out.write_text(report.to_json())
    if not args.no_plot:
        from .plotting import plot_predictions
        outputs = [[p.data for p in model.forward(s.image, "eval")] for s in samples[:4]]
        plot_predictions(samples, outputs, model.tasks, out.with_suffix(".png"))
    return 0


def cmd_gradcheck(args) -> int:
    broken = tuple(args.break_rule or ())
    for r in broken:
        if r not in RULES:
            raise ConfigError(f"unknown rule {r!r}; choose from {', '.join(RULES)}")
    results = run_suite(args.seed, broken, include_model=not args.skip_model,
                        coords_per_param=args.coords,
                        on_check=lambda c: print(c.line(), flush=True))
    failed = [c for c in results if not c.report.passed]
    if failed:
        for c in failed:
            print(f"FAILED {c.name}: worst {c.report.worst}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="demtg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-task dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--hw", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with SGD; writes log, checkpoint and loss plot")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset path (overrides data.path)")
    p.add_argument("-o", "--out", help="output directory (overrides output.path)")
    p.add_argument("-q", "--quiet", action="store_true", help="do not echo the log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint, or delta-m of raw scores")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--baseline", help="single-task scores 'v:hi,v:lo,...' or a report .json")
    p.add_argument("--scores", help="multi-task scores 'v:hi,...' (score-only delta-m)")
    p.add_argument("-o", "--out")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    p.add_argument("--config", help="accepted for symmetry; the micro model is fixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break", dest="break_rule", action="append", metavar="RULE",
                   help="corrupt a gradient rule (negative control)")
    p.add_argument("--coords", type=int, help="check this many coordinates per parameter")
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, ContractError, DimensionError, DatasetFormatError, KeyError,
            OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
