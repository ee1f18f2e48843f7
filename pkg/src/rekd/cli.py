"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from rekd.data import ConfigError, ParseError, gen_planted, load_table, save_table
from rekd.evaluation import SWEEP_COLUMNS, evaluate, evaluate_with_config, sweep_ratio_accuracy
from rekd.gradcheck import run_gradcheck
from rekd.io import CONFIG_KEYS, load_checkpoint, parse_config, write_run
from rekd.tensor import DomainError, Rng
from rekd.training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SPLITS = ("train", "dev", "test")
CLS_EPOCHS = 20
TRAIN_COMMANDS = {"train-cls": "cls", "train-re": "re", "train-student": "rekd"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    group = p.add_argument_group("config overrides")
    for key in CONFIG_KEYS:
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{key}", default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rekd", allow_abbrev=False,
                     description="Rationale extraction with knowledge distillation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write planted-rationale train/dev/test tables",
                       allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    for name, regime in TRAIN_COMMANDS.items():
        p = sub.add_parser(name, help=f"train in the {regime} regime", allow_abbrev=False)
        _add_config_flags(p)
        p.add_argument("--data", help="directory with train/dev/test tables "
                                      "(generated from the config when omitted)")
        p.add_argument("--run-dir", help="output directory")
        if regime == "rekd":
            p.add_argument("--teacher", help="teacher checkpoint (required)")

    p = sub.add_parser("eval", help="evaluate a checkpoint", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset table")
    p.add_argument("--tau", type=float, default=None, help="selection temperature")
    p.add_argument("--sampled", action="store_true", help="sample Gumbel noise at selection")
    p.add_argument("--seed", type=int, default=0, help="noise seed for --sampled")

    p = sub.add_parser("sweep", help="rationale ratio vs accuracy sweep", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--data", help="directory with train/dev/test tables")
    p.add_argument("--p-targets", default="0.05,0.15,0.35,0.75,1.0")
    p.add_argument("--seeds", default="2026,2027,2028")
    p.add_argument("--teacher", help="teacher checkpoint when regime = rekd")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("gradcheck", help="finite-difference and gradient identity checks",
                       allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for key in CONFIG_KEYS:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            out[key] = value
    return out


def _resolve(args, regime: str | None = None):
    overrides = _overrides(args)
    if regime is not None:
        overrides["regime"] = regime
    return parse_config(args.config, overrides)


def _load_splits(args, data_spec):
    if getattr(args, "data", None):
        root = Path(args.data)
        return tuple(load_table(root / f"{s}.txt") for s in SPLITS)
    return gen_planted(data_spec)


def _cmd_gen_data(args) -> int:
    _, spec = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, gen_planted(spec)):
        save_table(out / f"{name}.txt", ds)
        print(f"wrote {out / f'{name}.txt'} ({len(ds)} samples)")
    return EXIT_OK


def _cmd_train(args, regime: str) -> int:
    overrides = _overrides(args)
    teacher = None
    if regime == "rekd":
        path = args.teacher or overrides.get("teacher_checkpoint")
        if not path:
            file_cfg, _ = parse_config(args.config, {**overrides, "regime": regime})
            path = file_cfg.teacher_checkpoint
        if not path:
            raise ConfigError("train-student requires --teacher (teacher checkpoint path)")
        overrides["teacher_checkpoint"] = str(path)
        teacher, _ = load_checkpoint(path)
    overrides["regime"] = regime
    # classification gets a shorter default budget; file or flags still win
    base = TrainConfig(epochs=CLS_EPOCHS) if regime == "cls" else None
    cfg, data_spec = parse_config(args.config, overrides, base)
    train_set, dev_set, test_set = _load_splits(args, data_spec)
    run_dir = Path(args.run_dir or f"runs/{regime}-seed{cfg.seed}")
    try:
        art = train(cfg, train_set, dev_set, teacher=teacher)
    except TrainingDiverged as exc:
        write_run(run_dir, exc.artifacts, data_spec, {"status": "diverged", "error": str(exc)})
        print(f"error: {exc}; last finite checkpoint kept in {run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    report = evaluate_with_config(art.model, test_set, cfg) if len(test_set) else None
    extra = {"status": "ok", "test": None if report is None else report.to_dict()}
    write_run(run_dir, art, data_spec, extra)
    print(json.dumps({"run_dir": str(run_dir), "best_epoch": art.best_epoch,
                      "best_dev_criterion": art.best_dev,
                      "test_accuracy": None if report is None else report.accuracy,
                      "test_rationale_ratio": None if report is None
                      else report.rationale_ratio_mean}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, doc = load_checkpoint(args.checkpoint)
    data = load_table(args.data)
    tau = args.tau
    if tau is None:
        tau = (doc.get("config") or {}).get("tauK", 0.1)
    report = evaluate(model, data, tau, sampled=args.sampled, rng=Rng(args.seed, (4,)))
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _floats(text: str, name: str, kind=float) -> list:
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected a comma-separated list, got {text!r}") from None
    if not values:
        raise ConfigError(f"{name}: empty list")
    return values


def _cmd_sweep(args) -> int:
    cfg, data_spec = _resolve(args)
    p_targets = _floats(args.p_targets, "--p-targets")
    seeds = _floats(args.seeds, "--seeds", int)
    teacher = None
    if cfg.regime == "rekd":
        path = args.teacher or cfg.teacher_checkpoint
        if not path:
            raise ConfigError("sweep with regime = rekd requires --teacher")
        teacher, _ = load_checkpoint(path)
    rows = sweep_ratio_accuracy(cfg, _load_splits(args, data_spec), p_targets, seeds, teacher)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float)
                        else getattr(row, c) for c in SWEEP_COLUMNS])
    failed = [c for row in rows for c in row.cells if c.error]
    for c in failed:
        print(f"cell p_target={c.p_target} seed={c.seed} failed: {c.error}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command in TRAIN_COMMANDS:
            return _cmd_train(args, TRAIN_COMMANDS[args.command])
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_gradcheck(args)
    except (ConfigError, ParseError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
