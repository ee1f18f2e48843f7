"""Config files, metrics CSV and checkpoints.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment.
Training keys are the :class:`~rekd.training.TrainConfig` fields (loss
weights flattened in), dataset keys are the :class:`~rekd.data.DatasetSpec`
fields with ``seed`` spelled ``data_seed``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import typing
from pathlib import Path

import numpy as np

from rekd.data import ConfigError, DatasetSpec
from rekd.losses import LossWeights
from rekd.models import BackboneSpec, GeneratorNet, PredictorNet, RationaleModel
from rekd.tensor import DomainError, Rng
from rekd.training import METRIC_COLUMNS, RunArtifacts, TrainConfig, format_metrics_row

CHECKPOINT_VERSION = 1

_DATA_KEYS = {("data_seed" if f.name == "seed" else f.name): f.name
              for f in dataclasses.fields(DatasetSpec)}


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    out = {k: v for k, v in hints.items() if k != "weights"}
    out.update(typing.get_type_hints(LossWeights))
    data_hints = typing.get_type_hints(DatasetSpec)
    out.update({k: data_hints[v] for k, v in _DATA_KEYS.items()})
    return out


CONFIG_KEYS = _field_types()


def _coerce(key: str, raw: str, kind) -> object:
    raw = raw.strip()
    optional = typing.get_origin(kind) in (typing.Union, getattr(__import__("types"), "UnionType", None))
    if optional:
        if raw.lower() in ("", "none", "null"):
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            values[key.strip()] = value.strip()
    return values


def build_config(values: dict[str, object], base: TrainConfig | None = None,
                 base_data: DatasetSpec | None = None) -> tuple[TrainConfig, DatasetSpec]:
    train_kw, data_kw = {}, {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key")
        value = _coerce(key, raw, CONFIG_KEYS[key]) if isinstance(raw, str) else raw
        if key in _DATA_KEYS:
            data_kw[_DATA_KEYS[key]] = value
        else:
            train_kw[key] = value
    try:
        cfg = (base or TrainConfig()).replace(**train_kw)
    except DomainError as exc:
        key = str(exc).split(" ", 1)[0]
        raise ConfigError(f"{key}: {exc}") from None
    cfg.validate()
    data = dataclasses.replace(base_data or DatasetSpec(), **data_kw)
    data.validate()
    return cfg, data


def parse_config(path: str | os.PathLike | None, overrides: dict[str, object] | None = None,
                 base: TrainConfig | None = None) -> tuple[TrainConfig, DatasetSpec]:
    """Resolve a config file plus overrides (overrides win)."""
    values: dict[str, object] = dict(read_config_file(path)) if path else {}
    values.update(overrides or {})
    return build_config(values, base)


def dump_config(cfg: TrainConfig, data: DatasetSpec) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    for key, name in _DATA_KEYS.items():
        lines.append(f"{key} = {getattr(data, name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- metrics


def write_metrics(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(format_metrics_row(row))


def read_metrics(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | os.PathLike, model: RationaleModel, state: dict | None = None,
                    config: TrainConfig | None = None, dev_criterion: float | None = None,
                    rng: Rng | None = None, epoch: int | None = None) -> None:
    state = model.state() if state is None else state
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "has_generator": model.generator is not None,
        "param_order": list(state),
        "params": {k: {"shape": list(v.shape), "data": [float(x) for x in v.reshape(-1)]}
                   for k, v in state.items()},
        "config": None if config is None else config.to_dict(),
        "dev_criterion": dev_criterion,
        "epoch": epoch,
        "rng_state": None if rng is None else {"seed": rng.seed, "labels": list(rng.labels)},
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike) -> tuple[RationaleModel, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a checkpoint file ({exc})") from exc
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    spec = BackboneSpec(**doc["spec"])
    dummy = Rng(0)
    model = RationaleModel(GeneratorNet(spec, dummy) if doc["has_generator"] else None,
                           PredictorNet(spec, dummy))
    state = {k: np.array(doc["params"][k]["data"], dtype=np.float64).reshape(doc["params"][k]["shape"])
             for k in doc["param_order"]}
    model.load_state(state)
    return model, doc


def write_run(run_dir: str | os.PathLike, art: RunArtifacts, data_spec: DatasetSpec | None = None,
              extra_summary: dict | None = None) -> Path:
    """Persist metrics.csv, config.txt, summary.json and init/best/last checkpoints."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(run_dir / "metrics.csv", art.metrics)
    (run_dir / "config.txt").write_text(dump_config(art.config, data_spec or DatasetSpec()),
                                        encoding="utf-8")
    rng = Rng(art.config.seed)
    save_checkpoint(run_dir / "init.ckpt", art.model, art.init_state, art.config, None, rng, 0)
    best_dev = None if art.best_epoch == 0 else art.best_dev
    save_checkpoint(run_dir / "best.ckpt", art.model, art.best_state, art.config, best_dev, rng,
                    art.best_epoch)
    save_checkpoint(run_dir / "last.ckpt", art.model, art.last_state, art.config,
                    art.dev_history[-1] if art.dev_history else None, rng, len(art.dev_history))
    summary = art.summary()
    summary.update(extra_summary or {})
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n",
                                          encoding="utf-8")
    return run_dir
